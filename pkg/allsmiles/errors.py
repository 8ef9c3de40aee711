"""
Error hierarchy
Every failure the library reports is an AllSmilesError carrying named fields,
so the CLI can print it as one machine-parseable line.
"""

from typing import Any, Dict, Iterable, Optional


class AllSmilesError(Exception):
    """Base class for all library errors"""

    def __init__(self, message: str = "", **fields: Any):
        self.fields: Dict[str, Any] = fields
        super().__init__(message or self._default_message())

    def _default_message(self) -> str:
        if not self.fields:
            return type(self).__name__
        return ", ".join(f"{k}={v}" for k, v in self.fields.items())

    def __getattr__(self, name: str) -> Any:
        fields = self.__dict__.get("fields", {})
        if name in fields:
            return fields[name]
        raise AttributeError(name)

    @property
    def name(self) -> str:
        return type(self).__name__

    def one_line(self, **extra: Any) -> str:
        """Render as `error=<Name> key=value ... message="..."`"""
        parts = [f"error={self.name}"]
        for key, value in {**extra, **self.fields}.items():
            parts.append(f"{key}={_format_value(value)}")
        parts.append(f'message="{_escape(str(self))}"')
        return " ".join(parts)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple, set, frozenset)):
        return ",".join(str(v) for v in value) or "-"
    text = str(value)
    if any(ch.isspace() for ch in text) or '"' in text:
        return f'"{_escape(text)}"'
    return text


# SMILES text
class SmilesError(AllSmilesError):
    pass


class UnknownCharacter(SmilesError):
    def __init__(self, position: int, char: str = ""):
        super().__init__(f"unknown character {char!r} at {position}", position=position, char=char)


class UnterminatedBracket(SmilesError):
    def __init__(self, position: int):
        super().__init__(f"bracket opened at {position} is never closed", position=position)


class SmilesSyntaxError(SmilesError):
    def __init__(self, position: int, expected: Iterable[str]):
        expected = sorted(set(expected))
        super().__init__(f"unexpected token at {position}, expected one of {expected}",
                         position=position, expected=expected)


class UnclosedRing(SmilesError):
    def __init__(self, digit: int):
        super().__init__(f"ring bond {digit} never closed", digit=digit)


class RingBondMismatch(SmilesError):
    def __init__(self, digit: int, opened: str = "", closed: str = ""):
        super().__init__(f"ring bond {digit} opened with {opened or 'default'!r} "
                         f"but closed with {closed or 'default'!r}", digit=digit)


class RingDigitsExhausted(SmilesError):
    def __init__(self, open_rings: int):
        super().__init__(f"{open_rings} simultaneous ring closures exceed 100 slots",
                         open_rings=open_rings)


# Molecular graphs
class GraphError(AllSmilesError):
    pass


class DisconnectedGraph(GraphError):
    def __init__(self, components: int):
        super().__init__(f"graph has {components} components", components=components)


class DuplicateBond(GraphError):
    def __init__(self, a: int, b: int):
        super().__init__(f"atoms {a} and {b} bonded twice (or to themselves)", atoms=(a, b))


class ValenceExceeded(GraphError):
    def __init__(self, atom: int, used: int = 0, bound: Optional[int] = None):
        super().__init__(f"atom {atom} uses valence {used} above bound {bound}", atom=atom)


# Pushdown automaton
class GrammarError(AllSmilesError):
    pass


class IllegalToken(GrammarError):
    def __init__(self, state: str, token: str):
        super().__init__(f"token {token!r} not allowed in state {state}", state=state, token=token)


# Autodiff
class TensorError(AllSmilesError):
    pass


class ShapeMismatch(TensorError):
    def __init__(self, op: str, *shapes: Any):
        super().__init__(f"{op}: incompatible shapes {list(shapes)}", op=op,
                         shapes=[tuple(s) for s in shapes])


class NonScalarRoot(TensorError):
    def __init__(self, shape: Any):
        super().__init__(f"backward needs a scalar root, got shape {tuple(shape)}", shape=tuple(shape))


# Model and training
class ModelError(AllSmilesError):
    pass


class EmptySequence(ModelError):
    pass


class EmptyKeys(ModelError):
    pass


class EmptyTargets(ModelError):
    pass


class MoleculeMismatch(ModelError):
    def __init__(self, index: int):
        super().__init__(f"input string {index} is not the same molecule as string 0", index=index)


class AlignmentMissing(ModelError):
    def __init__(self, index: int):
        super().__init__(f"input {index} carries no atom alignment", index=index)


class MaxLengthExceeded(ModelError):
    def __init__(self, max_len: int):
        super().__init__(f"no beam reached eos within {max_len} tokens", max_len=max_len)


class CorpusEmpty(ModelError):
    pass


class NonFiniteLoss(ModelError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}", step=step)


class CheckpointFormatError(ModelError):
    pass


# Latent optimization
class OptimizationError(AllSmilesError):
    pass


class NoValidDecode(OptimizationError):
    def __init__(self, seed: int):
        super().__init__(f"trajectory {seed} never decoded to a parseable molecule", seed=seed)


class DegenerateDirections(OptimizationError):
    pass


# Configuration
class ConfigError(AllSmilesError):
    pass
