"""Exception hierarchy shared across the package."""


class TrackletLabError(Exception):
    """Base class for all library errors."""


class ConfigError(TrackletLabError):
    """Invalid or out-of-range run configuration."""


# --- manifest / datamodel ---

class ManifestError(TrackletLabError):
    """Base class for manifest ingestion failures."""


class MissingTracklet(ManifestError):
    """A record references a tracklet_id absent from the tracklet table."""


class DimensionMismatch(ManifestError):
    """A vector's length disagrees with the declared embedding dimension."""


class NonFiniteValue(ManifestError):
    """NaN or infinity encountered where a finite value is required."""


class DuplicateKey(ManifestError):
    """A key that must be unique appears more than once."""


class ZeroVector(TrackletLabError):
    """A vector with zero norm cannot be L2-normalized."""


# --- retrieval / aggregation ---

class EmptyGallery(TrackletLabError):
    """Gallery construction produced no rows."""


class NoEligibleNeighbors(TrackletLabError):
    """Every gallery record shares the probe's encounter."""


class NoProbes(TrackletLabError):
    """An evaluation was requested with an empty probe set."""


class EmptyTracklet(TrackletLabError):
    """Aggregation over zero frames."""


class Unsupported(TrackletLabError):
    """A declared-but-not-implemented strategy was requested."""


# --- explain ---

class EmptyFriendSet(TrackletLabError):
    """Proxy score requires at least one friend embedding."""


class EmptyFoeSet(TrackletLabError):
    """Proxy score requires at least one foe embedding."""


class OrderMismatch(TrackletLabError):
    """Relevance map shape disagrees with the patch grid."""


class ZeroRelevance(TrackletLabError):
    """Total absolute relevance is zero; mass ratio undefined."""


class ShapeMismatch(TrackletLabError):
    """Two grids that must share a shape do not."""


# --- clustering ---

class InfeasibleK(TrackletLabError):
    """Cannot-link constraints forbid merging down to the requested K."""


class DomainMismatch(TrackletLabError):
    """Two partitions do not cover the same item set."""


# --- synth ---

class InvalidSpec(TrackletLabError):
    """A scenario specification violates its own constraints."""
