import json


class ConfigError(ValueError):
    """Invalid experiment configuration; `key` is the offending dotted key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key

    def as_line(self):
        return json.dumps({'error': 'config', 'key': self.key, 'message': str(self)}, sort_keys=True)


class OutputCollisionError(ConfigError):
    pass


class NumericalError(ArithmeticError):
    """A linear solve or fixed-point check failed its residual tolerance."""


class HarnessError(RuntimeError):
    """An experiment failed after its configuration was accepted."""

    def __init__(self, exc):
        super().__init__(f'{type(exc).__name__}: {_message(exc)}')


def _message(exc):
    messages = getattr(exc, 'messages', None)
    return '; '.join(messages) if messages else str(exc)
