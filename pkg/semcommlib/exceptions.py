"""

    exceptions.py

        Errors raised across the library
        The CLI maps ConfigError to exit code 2 and any other SemCommError to exit code 3

"""

from typing import List


class SemCommError(Exception):
    pass

class ParameterError(SemCommError, ValueError):
    """ Invalid parameter values (negative variances, missing class priors, single domain...) """
    pass

class IdxFormatError(SemCommError):
    """ Malformed IDX container. Carries the byte offset where parsing failed """

    def __init__(self, message:str, offset:int):
        super().__init__(f'{message} (at byte offset {offset})')
        self.offset = offset

class NumericError(SemCommError, ArithmeticError):
    """ Singular systems, non-finite activations, non-SPD covariances """
    pass

class ContractViolation(SemCommError):
    pass

class ConfigError(SemCommError):
    """ Invalid experiment config. field_errors are 'dotted.path: message' strings """

    def __init__(self, message:str, field_errors:List[str]=None):
        self.field_errors = field_errors or []
        details = ''.join(f'\n - {e}' for e in self.field_errors)
        super().__init__(f'{message}{details}')
