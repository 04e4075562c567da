"""Shipped YAML presets; load them by name via :func:`pkgnet.config.load`."""
