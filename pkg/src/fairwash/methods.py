"""Named manipulation methods behind one call signature."""
from __future__ import annotations

from .data import Dataset, disparate_impact
from .discrete import match_greedy, replace_greedy
from .entropic import fairwash_entropic
from .model import Classifier
from .ot_projection import ManipulationResult, ProjectionConfig, fairwash_grad

METHODS = ("Entropic_b", "Entropic_p", "Grad_b", "Grad_p", "Grad_b_1D", "Grad_p_1D",
           "Replace", "Matching", "Matching_EoO")
DI_METHODS = METHODS[:-1]
MODEL_METHODS = ("Grad_b", "Grad_p", "Grad_b_1D", "Grad_p_1D")

_ALIASES = {m.lower(): m for m in METHODS}
_ALIASES.update({"entropic_balanced": "Entropic_b", "entropic_proportional": "Entropic_p",
                 "grad_balanced": "Grad_b", "grad_proportional": "Grad_p", "matching_di": "Matching"})


def canonical(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


def manipulate(method: str, data: Dataset, target: float, model: Classifier | None = None,
               speed: int = 1, projection: ProjectionConfig | None = None) -> ManipulationResult:
    """Apply ``method`` to ``data`` aiming at ``target`` (a DI, or an EoO bound
    for ``Matching_EoO``)."""
    method = canonical(method)
    di0 = disparate_impact(data)
    if method.startswith("Entropic"):
        mode = "balanced" if method.endswith("_b") else "proportional"
        if target <= di0:
            q = data.uniform()
        else:
            q = fairwash_entropic(data, target, mode)
        return ManipulationResult(method, q, di0, disparate_impact(q), target)
    if method in MODEL_METHODS:
        if model is None:
            raise ValueError(f"{method} needs the model")
        base = projection or ProjectionConfig()
        cfg = ProjectionConfig(**{**base.__dict__, "target_di": target,
                                  "mode": "balanced" if "_b" in method else "proportional",
                                  "variant_1d": method.endswith("_1D")})
        res = fairwash_grad(data, model, cfg)
        res.method = method
        return res
    if method == "Replace":
        return replace_greedy(data, target, speed)
    if method == "Matching":
        return match_greedy(data, target, "DI")
    return match_greedy(data, target, "EoO")
