# Simulation settings: module defaults, overridden per scenario

import logging
import os

from .errors import ConfigError
from .utils import to_bool


logger = logging.getLogger(__name__)


DEFAULT_SETTINGS = {
    # device-authenticator
    "gate_unlock_window": 60.0,
    "gate_max_failures": 5,
    # federation-engine
    "nonce_ttl": 120.0,
    "code_ttl": 120.0,
    "qr_ttl": 120.0,
    "token_ttl": 600.0,
    "tls": True,
    # pabac-credentials
    "rsa_modulus_bits": 2048,
    "cut_and_choose": 4,
    # baa-engine
    "baa_feature_dimension": 8,
    "baa_z": 3.0,
    "baa_tau": 0.8,
    "baa_min_window": 20,
    "baa_training_minimum": 50,
    "baa_rate_limit": 5,
    "baa_rate_window": 60.0,
    # idc-consolidator
    "otp_digits": 6,
    "otp_attempts": 3,
    "otp_ttl": 120.0,
    "auto_lock_failures": 10,
    "auto_lock_window": 300.0,
    "backup_password_min_length": 12,
    "document_trust": 100,
    "default_trust": 1,
    # password hashing (memory-hard)
    "scrypt_n": 2 ** 14,
    "scrypt_r": 8,
    "scrypt_p": 1,
}
BOOLEAN_SETTINGS = ("tls",)
INTEGER_SETTINGS = (
    "gate_max_failures", "rsa_modulus_bits", "cut_and_choose", "baa_feature_dimension",
    "baa_min_window", "baa_training_minimum", "baa_rate_limit", "otp_digits", "otp_attempts",
    "auto_lock_failures", "backup_password_min_length", "document_trust", "default_trust",
    "scrypt_n", "scrypt_r", "scrypt_p",
)

# Cheaper cryptography for desk-scale load runs and the test suite.
PROFILES = {
    "default": {},
    "bench": {
        "rsa_modulus_bits": 1024,
        "cut_and_choose": 2,
        "scrypt_n": 2 ** 4,
        "scrypt_r": 8,
    },
    "fast": {
        "rsa_modulus_bits": 1024,
        "scrypt_n": 2 ** 8,
    },
}


def load_settings(overrides=None, profile="default"):
    """Return a settings dict: defaults, then profile, then overrides (type-coerced)"""
    settings = DEFAULT_SETTINGS.copy()
    try:
        settings.update(PROFILES[profile])
    except KeyError:
        raise ConfigError(f"Unknown settings profile {profile!r}")
    overrides = dict(overrides or {})

    unknown = sorted(set(overrides) - set(DEFAULT_SETTINGS))
    if unknown:
        raise ConfigError(f"Unknown settings {', '.join(unknown)}")
    settings.update(overrides)

    for name, value in settings.items():
        try:
            if name in BOOLEAN_SETTINGS:
                settings[name] = to_bool(value)
            elif name in INTEGER_SETTINGS:
                settings[name] = int(value)
            else:
                settings[name] = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"The {name!r} setting has an invalid value {value!r}")

    if settings["scrypt_n"] < 2 or settings["scrypt_n"] & (settings["scrypt_n"] - 1):
        raise ConfigError("The 'scrypt_n' setting must be a power of 2")
    logger.debug("Expanded settings to %r", settings)
    return settings


def configure_logging(level=None):
    """Set the root log level from LOG_LEVEL (default WARNING)"""
    level = level or os.getenv("LOG_LEVEL", "WARNING")
    logging.basicConfig(format="%(levelname)s:%(name)s:%(message)s")
    logging.getLogger().setLevel(level)
