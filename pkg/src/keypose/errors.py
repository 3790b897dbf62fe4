"""Exception types shared across the toolkit."""


class KeyposeError(Exception):
    """Base class for all toolkit errors."""


# --- geometry ---------------------------------------------------------------

class BehindCamera(KeyposeError):
    """Point has non-positive depth in the camera frame and cannot be projected."""


class NonPositiveDepth(KeyposeError):
    """Unprojection requested with depth <= 0."""


# --- codec ------------------------------------------------------------------

class OutOfRange(KeyposeError):
    """A coordinate falls outside its configured encoding range."""

    def __init__(self, coordinate: str, value: float, lo: float, hi: float):
        self.coordinate = coordinate
        self.value = value
        super().__init__(
            f"{coordinate}={value!r} outside encoding range [{lo}, {hi}]"
        )


class GrammarViolation(KeyposeError):
    """A token sequence does not satisfy the expected grammar.

    ``position`` is the index of the first offending token (or the token
    index at which text parsing failed).
    """

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (token position {position})")


# --- decoder ----------------------------------------------------------------

class ScorerFailure(KeyposeError):
    """A scorer could not produce log-probabilities for a prefix."""


class StepOutOfRange(ScorerFailure):
    """Replay scorer asked for a step beyond the recorded trace."""


class VocabMismatch(ScorerFailure):
    """Logit dump vocabulary size does not match the expected vocabulary."""


class DegenerateDistribution(KeyposeError):
    """No token with finite probability survives masking/suppression."""


class DumpFormatError(KeyposeError):
    """A logit dump file is malformed; message carries the byte offset."""


# --- metrics ----------------------------------------------------------------

class LengthMismatch(KeyposeError):
    """Compared trajectories have different keypose counts."""


class DegenerateEpisode(KeyposeError):
    """Reward undefined: initial object position coincides with the goal."""


class DegenerateInput(KeyposeError):
    """Correlation undefined for the given inputs (too few or constant)."""


class UnmatchedEpisode(KeyposeError):
    """Prediction episode ids do not align with ground-truth episode ids."""


# --- scenegen ---------------------------------------------------------------

class PlacementFailure(KeyposeError):
    """Rejection sampling failed to place a valid scene within the attempt budget."""


class EmptyPool(KeyposeError):
    """Background randomization requested with an empty image pool."""


class DegenerateCrop(KeyposeError):
    """Valid-mode crop window does not intersect the image."""


# --- imitation --------------------------------------------------------------

class UnparseableInstruction(KeyposeError):
    """Instruction text could not be mapped to a task identity."""


class InsufficientPairs(KeyposeError):
    """Requested more demo/query pairs than exist without repetition."""


class MissingField(KeyposeError):
    """A record lacks a field required for prompt assembly."""


class InvalidPair(KeyposeError):
    """A pair uses the same scene as both demonstration and query."""
