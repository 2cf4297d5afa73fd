"""Exception hierarchy shared by every stage of the pipeline."""


class MtdbnError(Exception):
    pass


class ContractError(MtdbnError, ValueError):
    """Inputs violate a documented precondition (shapes, domains, kinds)."""


class DataError(MtdbnError):
    """Ingestion failure. Carries the offending file and row when known."""

    def __init__(self, message, path=None, row=None):
        self.path = path
        self.row = row
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{': '.join(where)}: {message}"
        super().__init__(message)


class ConfigError(MtdbnError):
    pass


class CalibrationError(MtdbnError):
    pass


class DivergenceError(MtdbnError, ArithmeticError):
    """Training produced non-finite or exploding parameters."""

    def __init__(self, message, epoch=None, batch=None, group=None):
        self.epoch = epoch
        self.batch = batch
        self.group = group
        loc = []
        if epoch is not None:
            loc.append(f"epoch {epoch}")
        if batch is not None:
            loc.append(f"batch {batch}")
        if group is not None:
            loc.append(f"group {group}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
