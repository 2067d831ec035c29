"""Exception hierarchy. Each error carries the process exit code it maps to."""


class BlockMergeError(Exception):
    """Base class for all engine errors"""

    exit_code: int = 1
    error_code: str = "error"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# Validation (exit 2)
class ValidationFailure(BlockMergeError):
    exit_code = 2
    error_code = "validation"

class MalformedHeaderError(ValidationFailure):
    error_code = "malformed_header"

class UnsupportedDtypeError(ValidationFailure):
    error_code = "unsupported_dtype"

class IntegrityError(ValidationFailure):
    error_code = "integrity"

class BlockOutOfRangeError(ValidationFailure):
    error_code = "block_out_of_range"

class CorruptPayloadError(ValidationFailure):
    error_code = "corrupt_payload"

class GeometryMismatchError(ValidationFailure):
    error_code = "geometry_mismatch"

class CatalogFormatError(ValidationFailure):
    error_code = "catalog_format"

class PlanMismatchError(ValidationFailure):
    error_code = "plan_mismatch"

class OperatorParamsError(ValidationFailure):
    error_code = "operator_params"

class MissingStatsError(ValidationFailure):
    error_code = "missing_stats"

class NonAdditiveOperatorError(ValidationFailure):
    error_code = "non_additive_operator"

class FamilySpecError(ValidationFailure):
    error_code = "family_spec"

class OmittedDeltaAccessError(ValidationFailure):
    error_code = "omitted_delta_access"


# Budget / soundness (exit 3)
class BudgetViolationError(BlockMergeError):
    exit_code = 3
    error_code = "budget_violation"

class SoundnessError(BlockMergeError):
    exit_code = 3
    error_code = "soundness"


# Transaction abort before publish (exit 4)
class TransactionAbortedError(BlockMergeError):
    exit_code = 4
    error_code = "transaction_aborted"

class WriterClosedError(TransactionAbortedError):
    error_code = "writer_closed"

class InjectedFault(TransactionAbortedError):
    error_code = "injected_fault"


# Failure after the snapshot became visible (exit 5)
class PostPublishError(BlockMergeError):
    exit_code = 5
    error_code = "post_publish"
