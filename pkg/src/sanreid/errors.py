"""Exception hierarchy. The CLI maps ConfigError to exit 2 and DataError to exit 3."""


class SanReidError(Exception):
    pass


class ConfigError(SanReidError, ValueError):
    """Invalid configuration, model build parameters, or checkpoint mismatch."""


class DataError(SanReidError):
    """Problems with dataset files, images, or evaluation inputs."""


class ManifestError(DataError, ValueError):
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


class ImageError(DataError, OSError):
    pass


class ProtocolError(DataError, ValueError):
    pass
