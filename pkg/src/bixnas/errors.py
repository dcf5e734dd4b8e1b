"""Exception hierarchy shared by every module of the engine."""


class EngineError(Exception):
    """Base class for all engine failures."""


class ShapeError(EngineError, ValueError):
    pass


class DomainError(EngineError, ValueError):
    pass


class ContractError(EngineError, ValueError):
    pass


class NumericError(EngineError, ArithmeticError):
    pass


class ConfigError(EngineError, ValueError):
    pass


class TopologyError(EngineError, ValueError):
    pass


class ParseError(TopologyError):
    """Malformed topology file. Carries the offending line and field when known."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class SearchError(EngineError, RuntimeError):
    pass


class CheckpointError(EngineError, RuntimeError):
    pass
