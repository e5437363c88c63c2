"""Control-invariant set computation and certification.

For each obstacle face the admissible state region is the convex piece of the
safe set on that side of the obstacle.  A control-invariant subset is computed
by the standard backward fixed point S <- S intersect Pre(S), where Pre is the
one-step existential preimage under bounded controls, and the result is
certified independently with containment LPs before it is ever used online.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import GeometryError, Polytope
from .world import Environment


class InvarianceError(Exception):
    pass


class UncertifiedError(InvarianceError):
    """Fixed-point iteration hit its cap without a certified invariant set."""

    def __init__(self, message: str, last_iterate: Polytope | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class LinearSystem:
    a_matrix: np.ndarray
    b_matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        b = np.asarray(self.b_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvarianceError(f"A must be square, got {a.shape}")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise InvarianceError(f"B shape {b.shape} inconsistent with A {a.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvarianceError("non-finite dynamics matrices")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrix", b)

    @property
    def n(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.b_matrix.shape[1]

    @staticmethod
    def from_environment(env: Environment) -> "LinearSystem":
        a, b = env.dynamics_matrices()
        return LinearSystem(a, b)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.a_matrix).tobytes())
        h.update(np.ascontiguousarray(self.b_matrix).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class AdmissiblePair:
    obstacle_index: int
    face_index: int
    state_region: Polytope
    control_region: Polytope


@dataclass(frozen=True)
class CisConfig:
    max_iterations: int = 100
    contraction: float = 0.999
    containment_tol: float = geometry.CONTAINMENT_TOL
    check_monotone: bool = True


@dataclass(frozen=True)
class CisEntry:
    polytope: Polytope
    empty: bool
    iterations: int
    contraction: float

    @property
    def num_rows(self) -> int:
        return 0 if self.empty else self.polytope.num_rows


@dataclass
class CisAtlas:
    entries: dict[tuple[int, int], CisEntry]
    system_hash: str

    def polytope(self, i: int, j: int) -> Polytope:
        return self.entries[(i, j)].polytope

    def is_entry_empty(self, i: int, j: int) -> bool:
        return self.entries[(i, j)].empty


def system_environment_hash(sys: LinearSystem, env: Environment) -> str:
    h = hashlib.sha256()
    h.update(sys.digest().encode())
    h.update(env.digest().encode())
    return h.hexdigest()


def admissible_pairs(env: Environment) -> list[AdmissiblePair]:
    """All (obstacle, face) admissible state/control pair sets, (i, j) ascending."""
    state_poly = env.state_polytope()
    controls = env.control_polytope()
    pairs = []
    for i in range(len(env.obstacles)):
        for j, (t_row, t_off) in enumerate(env.obstacle_faces(i)):
            region = state_poly.intersect(Polytope(t_row[None, :], [t_off]))
            pairs.append(AdmissiblePair(i, j, region, controls))
    return pairs


def pre_set(sys: LinearSystem, target: Polytope, controls: Polytope) -> Polytope:
    """Pre(S) = {x : exists u with G u <= g and A x + B u in S}, exactly.

    Built as the (x, u) polytope rows [S.A @ A, S.A @ B] <= S.b stacked with
    the control rows, then projected onto x by Fourier-Motzkin.
    """
    n, m = sys.n, sys.m
    if target.dim != n or controls.dim != m:
        raise InvarianceError("dimension mismatch in pre_set")
    if target.num_rows == 0:
        return Polytope(np.zeros((0, n)), np.zeros(0))
    xu_normals = np.hstack([target.normals @ sys.a_matrix,
                            target.normals @ sys.b_matrix])
    xu_normals = np.vstack([
        xu_normals,
        np.hstack([np.zeros((controls.num_rows, n)), controls.normals]),
    ])
    xu_offsets = np.concatenate([target.offsets, controls.offsets])
    try:
        return geometry.project(Polytope(xu_normals, xu_offsets), range(n))
    except GeometryError as exc:
        raise InvarianceError(
            f"pre_set projection failed ({target.num_rows} target rows): {exc}"
        ) from exc


def _shrink(poly: Polytope, factor: float) -> Polytope:
    """Contract offsets toward the Chebyshev center by the given factor."""
    center, _ = geometry.chebyshev_center(poly)
    shifted = poly.offsets - poly.normals @ center
    return Polytope(poly.normals, poly.normals @ center + factor * shifted)


def _fixed_point(sys: LinearSystem, state_region: Polytope, controls: Polytope,
                 config: CisConfig, contraction: float):
    s = geometry.reduce(state_region)
    for it in range(1, config.max_iterations + 1):
        target = s if contraction >= 1.0 else _shrink(s, contraction)
        pre = pre_set(sys, target, controls)
        candidate = s.intersect(pre)
        if geometry.is_empty(candidate):
            return Polytope.empty(sys.n), it, True
        s_next = geometry.reduce(candidate)
        if config.check_monotone and not geometry.contains(
                s, s_next, tol=config.containment_tol):
            raise InvarianceError("fixed-point iterate is not monotone")
        if geometry.contains(s_next, s, tol=config.containment_tol):
            return s_next, it, True
        s = s_next
    return s, config.max_iterations, False


def certify(sys: LinearSystem, s: Polytope, state_region: Polytope,
            controls: Polytope, tol: float = geometry.CONTAINMENT_TOL) -> bool:
    """Independent check: S within the admissible region and S within Pre(S)."""
    if not geometry.contains(state_region, s, tol=tol):
        return False
    pre = pre_set(sys, s, controls)
    return geometry.contains(pre, s, tol=tol)


def compute_cis(sys: LinearSystem, pair: AdmissiblePair,
                config: CisConfig = CisConfig()) -> CisEntry:
    """Certified control-invariant polytope for one admissible pair set."""
    if geometry.is_empty(pair.state_region):
        raise InvarianceError("compute_cis requires a non-empty state region")
    for contraction in (1.0, config.contraction):
        s, iterations, converged = _fixed_point(
            sys, pair.state_region, pair.control_region, config, contraction)
        if not converged:
            continue
        if s.num_rows == 1 and np.all(s.normals == 0):  # explicitly empty
            return CisEntry(s, True, iterations, contraction)
        if certify(sys, s, pair.state_region, pair.control_region,
                   config.containment_tol):
            return CisEntry(geometry.canonicalize(s), False, iterations,
                            contraction)
    raise UncertifiedError(
        f"face ({pair.obstacle_index}, {pair.face_index}) uncertified after "
        f"{config.max_iterations} iterations", last_iterate=s)


def _atlas_worker(args):
    sys, pair, config = args
    if geometry.is_empty(pair.state_region):
        return (pair.obstacle_index, pair.face_index,
                CisEntry(Polytope.empty(sys.n), True, 0, 1.0)), None
    try:
        return (pair.obstacle_index, pair.face_index,
                compute_cis(sys, pair, config)), None
    except UncertifiedError as exc:
        return None, (pair.obstacle_index, pair.face_index, str(exc))


def build_atlas(sys: LinearSystem, env: Environment,
                config: CisConfig = CisConfig(), workers: int = 1) -> CisAtlas:
    """Certified entry per (obstacle, face); any uncertified face fails the build."""
    pairs = admissible_pairs(env)
    jobs = [(sys, pair, config) for pair in pairs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_atlas_worker, jobs))
    else:
        results = [_atlas_worker(job) for job in jobs]
    entries = {}
    failures = []
    for ok, err in results:
        if err is not None:
            failures.append(err)
        else:
            i, j, entry = ok
            entries[(i, j)] = entry
    if failures:
        listing = ", ".join(f"({i},{j})" for i, j, _ in failures)
        raise UncertifiedError(f"uncertified faces: {listing}")
    return CisAtlas(entries=entries, system_hash=system_environment_hash(sys, env))


def sampled_invariance_check(sys: LinearSystem, s: Polytope, controls: Polytope,
                             count: int = 1000, seed: int = 0) -> int:
    """Count sampled states of S from which no admissible input stays in S."""
    samples = geometry.sample(s, count, seed=seed)
    failures = 0
    for x in samples:
        normals = np.vstack([controls.normals, s.normals @ sys.b_matrix])
        offsets = np.concatenate([
            controls.offsets,
            s.offsets - s.normals @ (sys.a_matrix @ x),
        ])
        if geometry.is_empty(Polytope(normals, offsets)):
            failures += 1
    return failures


# --- cache file (*.cis.json) ---

CACHE_VERSION = 1


def atlas_to_json_dict(atlas: CisAtlas) -> dict:
    entries = []
    for (i, j), entry in sorted(atlas.entries.items()):
        entries.append({
            "obstacle": i,
            "face": j,
            "empty": entry.empty,
            "normals": entry.polytope.normals.tolist(),
            "offsets": entry.polytope.offsets.tolist(),
            "iterations": entry.iterations,
            "contraction": entry.contraction,
        })
    return {
        "version": CACHE_VERSION,
        "system_hash": atlas.system_hash,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "entries": entries,
    }


def save_atlas(atlas: CisAtlas, path) -> None:
    with open(path, "w") as fh:
        json.dump(atlas_to_json_dict(atlas), fh)
        fh.write("\n")


def load_atlas(path) -> CisAtlas:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CACHE_VERSION:
        raise InvarianceError(f"unsupported cache version {doc.get('version')}")
    entries = {}
    for rec in doc["entries"]:
        poly = Polytope(np.array(rec["normals"], dtype=float),
                        np.array(rec["offsets"], dtype=float))
        entries[(rec["obstacle"], rec["face"])] = CisEntry(
            poly, bool(rec["empty"]), int(rec["iterations"]),
            float(rec["contraction"]))
    return CisAtlas(entries=entries, system_hash=doc["system_hash"])


def validate_atlas(atlas: CisAtlas, sys: LinearSystem, env: Environment) -> None:
    expected = system_environment_hash(sys, env)
    if atlas.system_hash != expected:
        raise InvarianceError(
            "atlas/environment hash mismatch: the cache was built for a "
            "different system or environment")
    for i in range(len(env.obstacles)):
        for j in range(len(env.obstacle_faces(i))):
            if (i, j) not in atlas.entries:
                raise InvarianceError(f"atlas is missing entry ({i},{j})")
