"""Exception hierarchy. The CLI maps these onto exit codes."""


class WashError(Exception):
    pass


class MissingInputError(WashError, FileNotFoundError):
    """A required input file or prior-stage artifact does not exist."""


class ValidationError(WashError, ValueError):
    pass


class GeometryError(ValidationError):
    """Degenerate or otherwise unusable geometry."""


class AlignmentError(ValidationError):
    """Rasters or grids that should share a grid do not."""


class EmptyInputError(ValidationError):
    """An operation received nothing to work on."""


class FormatError(ValidationError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class SchemaVersionError(FormatError):
    pass


class UndefinedMetricError(ValidationError):
    pass


class ModelCompatibilityError(ValidationError):
    pass
