# Phantom SSL testbed - Configuration modules
