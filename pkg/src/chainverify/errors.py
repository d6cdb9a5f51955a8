"""Exception hierarchy shared by all chainverify modules."""


class ChainVerifyError(Exception):
    pass


# core
class EmptyChain(ChainVerifyError, ValueError):
    pass


class InvalidSpec(ChainVerifyError, ValueError):
    pass


class AlignmentError(ChainVerifyError, ValueError):
    pass


# backend
class BackendError(ChainVerifyError):
    pass


class TransportError(BackendError):
    pass


class BackendRefusal(BackendError):
    pass


class ScriptMiss(BackendError, KeyError):
    pass


class CacheCorrupt(BackendError):
    pass


# verifiers
class EmptyTokenList(ChainVerifyError, ValueError):
    pass


class InvalidPerplexity(ChainVerifyError, ValueError):
    pass


class EmptyVerdicts(ChainVerifyError, ValueError):
    pass


class MissingLogprobs(ChainVerifyError, ValueError):
    pass


# mathcheck
class EvalError(ChainVerifyError, ValueError):
    pass


class ParseError(EvalError):
    pass


class DivisionByZero(EvalError, ZeroDivisionError):
    pass


class Overflow(EvalError, OverflowError):
    pass


class MathDomainError(EvalError):
    pass


class JsonParseError(ChainVerifyError, ValueError):
    pass


class UnknownOperator(ChainVerifyError, ValueError):
    pass


# scoring
class EmptyScores(ChainVerifyError, ValueError):
    pass


class MissingWeight(ChainVerifyError, KeyError):
    pass


class EmptyPool(ChainVerifyError, ValueError):
    pass


class EmptyEntries(ChainVerifyError, ValueError):
    pass


# harness
class SchemaError(ChainVerifyError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(SchemaError):
    pass


class UnparseableAnswer(ChainVerifyError, ValueError):
    pass


class LengthMismatch(ChainVerifyError, ValueError):
    pass


class EmptySet(ChainVerifyError, ValueError):
    pass


class ConstantInput(ChainVerifyError, ValueError):
    pass


# simcorr
class InvalidParam(ChainVerifyError, ValueError):
    pass
