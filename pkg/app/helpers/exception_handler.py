import enum
import logging

logger = logging.getLogger(__name__)


class ExceptionType(enum.Enum):
    CONFIG_ERROR = 2, '002', 'Invalid configuration'
    DATA_VALIDATION_ERROR = 3, '003', 'Dataset failed validation'
    NUMERIC_FAILURE = 4, '004', 'Numeric failure'

    def __new__(cls, *args, **kwds):
        value = len(cls.__members__) + 1
        obj = object.__new__(cls)
        obj._value_ = value
        return obj

    def __init__(self, exit_code, code, message):
        self.exit_code = exit_code
        self.code = code
        self.message = message


class CustomException(Exception):
    exit_code: int
    code: str
    message: str

    def __init__(self, exit_code: int = None, code: str = None, message: str = None):
        self.exit_code = exit_code if exit_code else 1
        self.code = code if code else str(self.exit_code).zfill(3)
        self.message = message
        super().__init__(message)

    @classmethod
    def of(cls, exception_type: ExceptionType, detail: str = None):
        message = f"{exception_type.message}: {detail}" if detail else exception_type.message
        return cls(exit_code=exception_type.exit_code, code=exception_type.code, message=message)


class ConfigError(CustomException):
    def __init__(self, message: str, key_path: str = None):
        self.key_path = key_path
        detail = f"{key_path}: {message}" if key_path else message
        super().__init__(
            exit_code=ExceptionType.CONFIG_ERROR.exit_code,
            code=ExceptionType.CONFIG_ERROR.code,
            message=detail,
        )


class DataValidationError(CustomException):
    def __init__(self, message: str, patient_id: str = None, field: str = None):
        self.patient_id = patient_id
        self.field = field
        parts = [p for p in (f"patient {patient_id}" if patient_id else None, field) if p]
        detail = f"{': '.join(parts)}: {message}" if parts else message
        super().__init__(
            exit_code=ExceptionType.DATA_VALIDATION_ERROR.exit_code,
            code=ExceptionType.DATA_VALIDATION_ERROR.code,
            message=detail,
        )


class MaskingError(DataValidationError):
    pass


class NumericError(CustomException):
    def __init__(self, message: str, diagnostics: dict = None):
        self.diagnostics = diagnostics or {}
        detail = message
        if self.diagnostics:
            detail += " (" + ", ".join(f"{k}={v}" for k, v in self.diagnostics.items()) + ")"
        super().__init__(
            exit_code=ExceptionType.NUMERIC_FAILURE.exit_code,
            code=ExceptionType.NUMERIC_FAILURE.code,
            message=detail,
        )


def cli_exception_handler(exc: CustomException) -> int:
    logger.error("[%s] %s", exc.code, exc.message)
    return exc.exit_code


def get_message_validation(exc) -> str:
    """Flatten a pydantic ValidationError into 'a.b.c: msg' fragments."""
    message = ""
    for error in exc.errors():
        loc = ".".join(str(part) for part in error.get("loc", ()))
        message += loc + ': ' + error.get("msg") + ", "

    return message[:-2]


def first_error_path(exc) -> str:
    errors = exc.errors()
    if not errors:
        return None
    return ".".join(str(part) for part in errors[0].get("loc", ()))
