# Shared helpers: image primitives, image I/O, weight files, logging
