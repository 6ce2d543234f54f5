# Core infrastructure: interfaces, errors and the event bus
