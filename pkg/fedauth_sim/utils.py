import base64
import hmac
import json


QR_SCHEME = "fido-qr"


def canonical_json(obj):
    """Return the canonical JSON bytes of obj (sorted keys, no whitespace, ASCII only).

    Every signature and every event log line in the simulation is computed over
    these bytes, so two equal objects always serialize identically.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def b64encode(data):
    """Return unpadded urlsafe base64 text for data"""
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64decode(text):
    """Inverse of b64encode. Raises ValueError on malformed input."""
    if not isinstance(text, str):
        raise ValueError(f"Invalid base64 value {text!r}")
    padded = text + "=" * (-len(text) % 4)
    try:
        return base64.urlsafe_b64decode(padded.encode("ascii"))
    except (UnicodeEncodeError, ValueError) as exc:
        raise ValueError(f"Invalid base64 value {text!r}") from exc


def secure_equal(left, right):
    """Constant-time comparison for str or bytes secrets"""
    if isinstance(left, str):
        left = left.encode("utf-8")
    if isinstance(right, str):
        right = right.encode("utf-8")
    return hmac.compare_digest(left or b"", right or b"")


def format_qr_payload(idp=None, session_id=None, challenge=None, defaults_from=None):
    """Return the text encoded in a desktop-login QR code.

    defaults_from can be an existing payload, which will be used to fill in any
    missing components.

    >>> format_qr_payload(idp="idp1", session_id="qr-1", challenge="abc")
    'fido-qr:idp1:qr-1:abc'
    """
    if defaults_from is not None:
        _idp, _session_id, _challenge = parse_qr_payload(defaults_from)
        idp = idp if idp is not None else _idp
        session_id = session_id if session_id is not None else _session_id
        challenge = challenge if challenge is not None else _challenge

    return f"{QR_SCHEME}:{idp}:{session_id}:{challenge}"


def parse_qr_payload(payload):
    """Split a QR payload into (idp, session_id, challenge)"""
    try:
        scheme, idp, session_id, challenge = payload.split(":")
    except (AttributeError, TypeError, ValueError):
        raise ValueError(f"Invalid QR payload {payload!r}")
    if scheme != QR_SCHEME:
        raise ValueError(f"Invalid QR payload {payload!r}")
    return idp, session_id, challenge


def to_bool(val):
    """Coerce a settings or schema value to a bool.

    Scenario files and raw identity attributes carry booleans as JSON true/false, 0/1 or
    strings; "true" and "1" are True, "false", "0", "null", "none" and "" are False
    (any case). Anything else raises ValueError, e.g. to_bool("yes").
    """
    strval = str(val).casefold()
    if strval in ('true', '1'):
        return True
    elif strval in ('false', '0', 'null', 'none', ''):
        return False
    else:
        raise ValueError(f"Invalid boolean value {val!r}")
