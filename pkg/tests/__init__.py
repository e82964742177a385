# Phantom SSL testbed - test modules
