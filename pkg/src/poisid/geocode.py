"""Plus Code (Open Location Code) cell encoding and region vocabularies."""

from dataclasses import dataclass, field

ALPHABET = "23456789CFGHJMPQRVWX"
SEPARATOR = "+"
PADDING = "0"
SEPARATOR_POSITION = 8
PRECISIONS = (2, 4, 6, 8, 10)

_BASE = 20
_PAIR_DIGITS = 10
# Integer resolution of a 10-digit code: 1/8000 degree on both axes.
_FINAL = _BASE ** (_PAIR_DIGITS // 2 - 2)
_DIGIT_VALUE = {c: i for i, c in enumerate(ALPHABET)}


def cell_size(precision):
    """Side length in degrees of a cell at ``precision`` digits."""
    return 20.0 / _BASE ** (precision // 2 - 1)


def _check_precision(precision):
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}, got {precision!r}")


def encode_plus_code(lat, lon, precision=8):
    """Encode a coordinate as a Plus Code with ``precision`` significant digits."""
    _check_precision(precision)
    lat = min(90.0, max(-90.0, float(lat)))
    lon = float(lon)
    if not (-180.0 <= lon < 180.0):
        lon = (lon + 180.0) % 360.0 - 180.0
    if lat == 90.0:
        lat -= cell_size(precision)

    # Integer conversion avoids float drift across digit positions.
    lat_val = int(round((lat + 90.0) * _FINAL, 6))
    lon_val = int(round((lon + 180.0) * _FINAL, 6))
    digits = []
    for _ in range(_PAIR_DIGITS // 2):
        digits.append(ALPHABET[lon_val % _BASE])
        digits.append(ALPHABET[lat_val % _BASE])
        lat_val //= _BASE
        lon_val //= _BASE
    code = "".join(reversed(digits))[:precision]
    code = code.ljust(SEPARATOR_POSITION, PADDING)
    return code[:SEPARATOR_POSITION] + SEPARATOR + code[SEPARATOR_POSITION:]


def _digits(code):
    if code.count(SEPARATOR) != 1 or code.index(SEPARATOR) != SEPARATOR_POSITION:
        raise ValueError(f"invalid plus code {code!r}: separator must follow the 8th digit")
    body = code.replace(SEPARATOR, "")
    digits = body.rstrip(PADDING)
    if PADDING in digits:
        raise ValueError(f"invalid plus code {code!r}: padding inside digits")
    for ch in digits:
        if ch not in _DIGIT_VALUE:
            raise ValueError(f"invalid plus code {code!r}: bad character {ch!r}")
    if len(digits) not in PRECISIONS:
        raise ValueError(f"invalid plus code {code!r}: {len(digits)} significant digits")
    return digits


def decode_cell(code):
    """Bounding box ``(lat_lo, lat_hi, lon_lo, lon_hi)`` of a code's cell."""
    digits = _digits(code.upper())
    lat_lo = -90.0
    lon_lo = -180.0
    size = 20.0 * _BASE
    for i in range(0, len(digits), 2):
        size /= _BASE
        lat_lo += _DIGIT_VALUE[digits[i]] * size
        lon_lo += _DIGIT_VALUE[digits[i + 1]] * size
    return lat_lo, lat_lo + size, lon_lo, lon_lo + size


def precision_of(code):
    return len(_digits(code.upper()))


@dataclass
class RegionVocab:
    """Sorted distinct region codes; unknown codes map to ``unk_id``."""

    codes: list
    precision: int = 8
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.codes = list(self.codes)
        self.index = {c: i for i, c in enumerate(self.codes)}
        if len(self.index) != len(self.codes):
            raise ValueError("region vocabulary contains duplicate codes")

    def __len__(self):
        return len(self.codes)

    @property
    def unk_id(self):
        return len(self.codes)

    def id_of(self, code):
        return self.index.get(code, self.unk_id)

    def id_for(self, lat, lon):
        return self.id_of(encode_plus_code(lat, lon, self.precision))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for c in self.codes:
                f.write(c + "\n")

    @classmethod
    def load(cls, path, precision=8):
        with open(path, encoding="utf-8") as f:
            return cls(f.read().splitlines(), precision)


def build_region_vocab(pois, precision=8):
    """Vocabulary over the distinct codes of ``pois`` (mapping or iterable of records)."""
    records = pois.values() if hasattr(pois, "values") else pois
    codes = {encode_plus_code(p.latitude, p.longitude, precision) for p in records}
    if not codes:
        raise ValueError("cannot build a region vocabulary from zero POIs")
    return RegionVocab(sorted(codes), precision)

