"""Indoor localization from BLE RSSI and inertial data with a particle-filter front-end and smoothing back-end."""

__version__ = "0.1.0"
