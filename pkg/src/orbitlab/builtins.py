"""Built-in vector-field families."""

from __future__ import annotations

from .fields import FieldFamily

_FAMILIES = {
    "example-graph": (
        "Y1 = d1 + 2|x1| d2, Y2 = |x2 - x1|x1|| d2; rank 1 on the graph x2 = x1|x1|, rank 2 off it",
        [["1", "2*abs(x1)"], ["0", "abs(x2 - x1*abs(x1))"]],
    ),
    "balan": (
        "Y1 = exp(-1/|x|^2) d1, Y2 = |x|^2 d2; involutive but structure coefficients blow up at 0",
        [["exp(-1/(x1^2 + x2^2))", "0"], ["0", "x1^2 + x2^2"]],
    ),
    "counterexample": (
        "Y1 = d1, Y2 = exp(-1/x1^2) d2; rank drops on the x2-axis although the orbit is the plane",
        [["1", "0"], ["0", "exp(-1/x1^2)"]],
    ),
    "plane": ("Y1 = d1, Y2 = d2; the control distance is Euclidean", [["1", "0"], ["0", "1"]]),
    "rotation": ("Y1 = x2 d1 - x1 d2; orbits are circles around 0", [["x2", "-x1"]]),
    "grushin": ("Y1 = d1, Y2 = x1 d2; smooth, rank 1 on the x2-axis", [["1", "0"], ["0", "x1"]]),
}


def list_builtins() -> list[tuple[str, str]]:
    return [(name, desc) for name, (desc, _) in _FAMILIES.items()]


def builtin_family(name: str) -> FieldFamily:
    try:
        _, fields = _FAMILIES[name]
    except KeyError:
        raise KeyError(f"unknown built-in family {name!r}; known: {', '.join(_FAMILIES)}") from None
    return FieldFamily.from_strings(fields, name=name)
