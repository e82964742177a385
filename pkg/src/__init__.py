# Phantom SSL testbed - Source modules
