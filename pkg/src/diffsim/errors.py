"""Exception hierarchy.

Validation problems (bad shapes, bad manifests, bad configs) derive from
:class:`ValidationError`; the CLI maps those to exit code 2 and everything
else to exit code 1.
"""


class DiffSimError(Exception):
    pass


class ValidationError(DiffSimError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class DegenerateFeatureError(ValidationError):
    """An aligned feature row has zero norm, so its cosine is undefined."""

    def __init__(self, row: int, operand: str = "x"):
        self.row = row
        self.operand = operand
        super().__init__(f"all-zero feature row {row} in operand {operand!r}")


class ConfigError(ValidationError):
    pass


class UnknownBackendError(ConfigError, KeyError):
    def __str__(self):
        return ValueError.__str__(self)


class SiteNotFoundError(ConfigError):
    pass


class ManifestError(ValidationError):
    pass


class ImageError(ValidationError):
    pass


class WeightsMissingError(DiffSimError):
    def __init__(self, backend_id: str, path):
        self.backend_id = backend_id
        self.path = path
        super().__init__(
            f"weights for backend {backend_id!r} not found; expected them at {path} "
            f"(set DIFFSIM_WEIGHTS_DIR)"
        )


class CacheIntegrityError(DiffSimError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"cache entry {key!r} failed integrity check: {reason}")


class TripletError(DiffSimError):
    """Scoring one triplet failed; carries the triplet id."""

    def __init__(self, triplet_id: str, cause: Exception):
        self.triplet_id = triplet_id
        self.cause = cause
        super().__init__(f"triplet {triplet_id!r}: {cause}")
