"""A small Java-like method language and seeded bug synthesis.

Seed methods are generated from templates that only ever use the canonical
operator forms (&&, ||, ==, <=) and fixed boolean conventions (null guards
return false, loop conditions compare against true). Mutations then produce
the degraded forms, so every planted bug is recoverable from context:

    operator_swap   && -> &, || -> |, == -> =, <= -> <
    bool_flip       true <-> false at one of the conventional sites
    drop_token      remove a structural token (@Override, ;, ))
    stray_token     duplicate an identifier next to itself

A (buggy, fixed) pair is the mutated program and its original. Mutations are
word-token level; whitespace is a single space between tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MUTATION_CLASSES = ("operator_swap", "bool_flip", "drop_token", "stray_token")

_OPERATOR_DEGRADE = {"&&": "&", "||": "|", "==": "=", "<=": "<"}
_DROPPABLE = ("@Override", ";", ")")

_TYPES = ["Quality", "Format", "Point", "Event", "Filter", "Buffer", "Stream", "Config",
          "Window", "Handler", "Logger", "Parser", "Reader", "Writer", "Session", "Packet",
          "Widget", "Camera", "Sensor", "Router"]
_FIELDS = ["rate", "size", "value", "count", "name", "state", "level", "index", "width",
           "depth", "offset", "length", "total", "limit", "weight", "height", "speed",
           "angle", "score", "delay", "port", "seq"]
_VARS = ["q", "f", "p", "e", "b", "s", "item", "node", "v", "w", "r", "t", "obj", "cur",
         "tmp", "arg"]
_GET_NAMES = ["getName", "getValue", "getSize", "getCount", "getLevel", "getIndex",
              "getState", "getWidth", "getDepth", "getTotal", "getLimit", "getOffset",
              "getScore", "getSpeed"]
_CALL_NAMES = ["step", "stop", "apply", "reset", "update", "close", "init", "flush",
               "refresh", "notify", "cancel", "commit", "rollback", "validate"]


def _template_getter(rng, pick):
    t, g, f = pick(_TYPES), pick(_GET_NAMES), pick(_FIELDS)
    return f"@Override public {t} {g} ( ) {{ return this . {f} ; }}".split()


def _template_equals(rng, pick):
    t, v = pick(_TYPES), pick(_VARS)
    f1, f2 = rng.choice(_FIELDS, size=2, replace=False)
    return (
        f"@Override public boolean equals ( {t} {v} ) {{ "
        f"if ( {v} == null ) {{ return false ; }} "
        f"return {v} . {f1} == this . {f1} && {v} . {f2} == this . {f2} ; }}"
    ).split()


def _template_guard(rng, pick):
    t, v, g = pick(_TYPES), pick(_VARS), pick(_GET_NAMES)
    f1, f2 = rng.choice(_FIELDS, size=2, replace=False)
    return (
        f"@Override public long {g} ( {t} {v} ) {{ "
        f"if ( {v} == null ) {{ throw new Error ( ) ; }} "
        f"if ( {f1} <= 0 ) {{ return - 1 ; }} "
        f"return max ( {f2} , {f1} ) ; }}"
    ).split()


def _template_loop(rng, pick):
    f, c1, c2 = pick(_FIELDS), pick(_CALL_NAMES), pick(_CALL_NAMES)
    return (
        f"@Override public void run ( ) {{ "
        f"while ( {f} == true ) {{ {c1} ( ) ; }} {c2} ( ) ; }}"
    ).split()


def _template_check(rng, pick):
    f = pick(_FIELDS)
    return (
        f"@Override public boolean check ( int a , int b ) {{ "
        f"return a <= b || a == {f} ; }}"
    ).split()


def _template_update(rng, pick):
    t, v, f, c = pick(_TYPES), pick(_VARS), pick(_FIELDS), pick(_CALL_NAMES)
    return (
        f"@Override public void update ( {t} {v} ) {{ "
        f"if ( {v} == null ) {{ return ; }} this . {f} . {c} ( {v} ) ; }}"
    ).split()


_TEMPLATES = (
    _template_getter,
    _template_equals,
    _template_guard,
    _template_loop,
    _template_check,
    _template_update,
)

_IDENTIFIERS = set(_TYPES) | set(_FIELDS) | set(_VARS) | set(_GET_NAMES) | set(_CALL_NAMES)


def generate_program(rng: np.random.Generator) -> list[str]:
    """One random seed method as a list of word tokens."""

    def pick(pool):
        return pool[int(rng.integers(0, len(pool)))]

    template = _TEMPLATES[int(rng.integers(0, len(_TEMPLATES)))]
    return template(rng, pick)


@dataclass(frozen=True)
class MutationSite:
    kind: str
    index: int


def mutation_sites(tokens: list[str], classes: tuple[str, ...]) -> list[MutationSite]:
    sites: list[MutationSite] = []
    for i, tok in enumerate(tokens):
        if "operator_swap" in classes and tok in _OPERATOR_DEGRADE:
            sites.append(MutationSite("operator_swap", i))
        if "bool_flip" in classes and tok in ("true", "false"):
            sites.append(MutationSite("bool_flip", i))
        if "drop_token" in classes and tok in _DROPPABLE:
            sites.append(MutationSite("drop_token", i))
        if "stray_token" in classes and tok in _IDENTIFIERS:
            sites.append(MutationSite("stray_token", i))
    return sites


def apply_mutations(tokens: list[str], sites: list[MutationSite]) -> list[str]:
    """Apply the chosen sites, highest index first so positions stay valid."""
    out = list(tokens)
    for site in sorted(sites, key=lambda s: -s.index):
        tok = out[site.index]
        if site.kind == "operator_swap":
            out[site.index] = _OPERATOR_DEGRADE[tok]
        elif site.kind == "bool_flip":
            out[site.index] = "false" if tok == "true" else "true"
        elif site.kind == "drop_token":
            del out[site.index]
        elif site.kind == "stray_token":
            out.insert(site.index + 1, tok)
        else:
            raise ValueError(f"unknown mutation kind {site.kind}")
    return out


def normalize_identifiers(tokens: list[str]) -> list[str]:
    """Rename pool identifiers to positional abstract names (TYPE_n, VAR_n,
    METHOD_n), consistently within one program."""
    mapping: dict[str, str] = {}
    counters = {"TYPE": 0, "VAR": 0, "METHOD": 0}

    def abstract(tok: str) -> str:
        if tok in mapping:
            return mapping[tok]
        if tok in _TYPES:
            cat = "TYPE"
        elif tok in _FIELDS or tok in _VARS:
            cat = "VAR"
        elif tok in _GET_NAMES or tok in _CALL_NAMES:
            cat = "METHOD"
        else:
            return tok
        counters[cat] += 1
        mapping[tok] = f"{cat}_{counters[cat]}"
        return mapping[tok]

    return [abstract(t) for t in tokens]


def synthesize_bug_corpus(
    n: int,
    seed: int = 0,
    classes: tuple[str, ...] = MUTATION_CLASSES,
    double_frac: float = 0.25,
    normalize: bool = False,
) -> list[dict]:
    """Seeded corpus of (buggy, fixed) pairs with one or two planted bugs each.

    Rows are dicts {id, buggy, fixed, classes}. A draw whose program offers no
    site for the requested mutation count is skipped (logged) and redrawn.
    """
    for cls in classes:
        if cls not in MUTATION_CLASSES:
            raise ValueError(f"unknown mutation class {cls!r}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    rows: list[dict] = []
    skipped = 0
    while len(rows) < n:
        program = generate_program(rng)
        if normalize:
            program = normalize_identifiers(program)
        n_edits = 2 if (double_frac > 0 and rng.random() < double_frac) else 1
        sites = mutation_sites(program, classes)
        if len(sites) < n_edits:
            skipped += 1
            log.debug("no applicable mutation sites; skipping a draw")
            continue
        chosen_idx = rng.choice(len(sites), size=n_edits, replace=False)
        chosen = [sites[int(i)] for i in chosen_idx]
        if len({s.index for s in chosen}) < len(chosen):
            skipped += 1
            continue
        buggy = apply_mutations(program, chosen)
        rows.append({
            "id": f"syn-{len(rows):06d}",
            "buggy": " ".join(buggy),
            "fixed": " ".join(program),
            "classes": sorted(s.kind for s in chosen),
        })
    if skipped:
        log.info("synthesis skipped %d draws without applicable sites", skipped)
    return rows
