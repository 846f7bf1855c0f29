"""Camera calibration: Levenberg-Marquardt over poses, intrinsics and,
in the refinement stage, per-node 3D target corrections.

The projection model is pinhole + 3-term radial distortion (rho
normalized by the model's FOV radius). Fitting starts with intrinsics
frozen and unfreezes them in stages (poses -> +focal/principal ->
+radial). Jacobians are analytic (right-Jacobian of the rotation
exponential for the pose block) and validated against finite
differences in the tests.

Node refinement adds a 3-vector per lattice node, regularized toward
the ideal flat equidistant target; it never increases the mean
reprojection error (the guard restores the unrefined solution if it
would).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DataError, DivergenceError
from ..rectify import DistortionModel, undistort
from .detect import GridNodeSet
from .pattern import Pose, TargetSpec, rodrigues, _skew

STAGES = ("pose", "pose+fc", "pose+fc+k")


@dataclass
class LMOptions:
    max_iter: int = 100
    cost_tol: float = 1e-10
    step_tol: float = 1e-12
    mu0: float = 1e-3
    max_solve_failures: int = 20


@dataclass
class CameraSolution:
    model: DistortionModel
    poses: list                    # Pose per view
    mre: float
    converged: bool = True
    corrections: dict = field(default_factory=dict)  # (u, v) -> xyz meters
    stage_costs: list = field(default_factory=list)


def _right_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    return (np.eye(3)
            - (1.0 - np.cos(theta)) / theta**2 * k
            + (theta - np.sin(theta)) / theta**3 * (k @ k))


def _project_with_jac(f, cx, cy, ks, r_fov, rot, rvec, tvec, pts,
                      want_jac: bool):
    """Project target points; optionally return per-parameter Jacobians.

    Returns (proj (N,2), jac dict) with blocks 'rvec','tvec' (N,2,3),
    'f','cx','cy','k1','k2','k3' (N,2) and 'point' (N,2,3).
    """
    q = pts @ rot.T + tvec
    qz = q[:, 2]
    if np.any(qz <= 1e-9):
        raise DataError("points behind the camera during projection")
    n = q[:, :2] / qz[:, None]
    pc = f * n
    rho2 = np.sum(pc * pc, axis=1) / r_fov**2
    k1, k2, k3 = ks
    s = 1.0 + k1 * rho2 + k2 * rho2**2 + k3 * rho2**3
    proj = np.array([cx, cy]) + pc * s[:, None]
    if not want_jac:
        return proj, None
    sp = k1 + 2.0 * k2 * rho2 + 3.0 * k3 * rho2**2   # ds/drho2
    # d out / d pc = s I + (2 sp / r^2) pc pc^T
    douts = (s[:, None, None] * np.eye(2)[None]
             + (2.0 * sp / r_fov**2)[:, None, None]
             * pc[:, :, None] * pc[:, None, :])
    # d n / d q
    dn = np.zeros((len(q), 2, 3))
    dn[:, 0, 0] = 1.0 / qz
    dn[:, 1, 1] = 1.0 / qz
    dn[:, 0, 2] = -q[:, 0] / qz**2
    dn[:, 1, 2] = -q[:, 1] / qz**2
    dout_dq = douts @ (f * dn)
    jr = _right_jacobian(np.asarray(rvec))
    # d q / d rvec = -R [X]x Jr
    dq_dr = np.einsum("ab,nbc,cd->nad", rot,
                      np.stack([-_skew(p) for p in pts]), jr)
    jac = {
        "rvec": dout_dq @ dq_dr,
        "tvec": dout_dq,
        "point": dout_dq @ rot,
        "f": (pc / f) * (s + 2.0 * sp * rho2)[:, None],
        "cx": np.tile([1.0, 0.0], (len(q), 1)),
        "cy": np.tile([0.0, 1.0], (len(q), 1)),
        "k1": pc * rho2[:, None],
        "k2": pc * rho2[:, None]**2,
        "k3": pc * rho2[:, None]**3,
    }
    return proj, jac


def levenberg_marquardt(residual_jac, x0: np.ndarray, mask: np.ndarray,
                        options: LMOptions = LMOptions()):
    """Masked LMA with Marquardt diagonal scaling and strict descent.

    `residual_jac(x, want_jac)` returns (r, J or None). Only parameters
    with mask True move. Returns (x, cost, converged).
    """
    x = x0.copy()
    r, jac = residual_jac(x, True)
    cost = float(r @ r)
    mu = options.mu0
    nu = 2.0
    converged = False
    failures = 0
    for _ in range(options.max_iter):
        jm = jac[:, mask]
        a = jm.T @ jm
        g = jm.T @ r
        d = np.diag(a).copy()
        d[d < 1e-12] = 1e-12
        try:
            delta = np.linalg.solve(a + mu * np.diag(d), -g)
        except np.linalg.LinAlgError:
            failures += 1
            if failures > options.max_solve_failures:
                return x, cost, False
            mu *= 10.0
            continue
        failures = 0
        if np.linalg.norm(delta) < options.step_tol:
            converged = True
            break
        x_try = x.copy()
        x_try[mask] = x[mask] + delta
        r_try, _ = residual_jac(x_try, False)
        cost_try = float(r_try @ r_try)
        pred = float(delta @ (mu * d * delta - g))
        rho = (cost - cost_try) / pred if pred > 0 else -1.0
        if cost_try < cost:
            rel_drop = (cost - cost_try) / max(cost, 1e-300)
            x = x_try
            r, jac = residual_jac(x, True)
            cost = cost_try
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0)**3)
            nu = 2.0
            if rel_drop < options.cost_tol:
                converged = True
                break
        else:
            mu *= nu
            nu *= 2.0
            if mu > 1e16:
                return x, cost, False
    return x, cost, converged


class _Problem:
    """Observation bookkeeping and the packed parameter vector."""

    def __init__(self, views: list[GridNodeSet], spec: TargetSpec,
                 seed: DistortionModel, with_corrections: bool,
                 sigma_prior_m: float = 0.004):
        self.spec = spec
        self.n_views = len(views)
        self.obs_uv = [v.uv.astype(np.float64) for v in views]
        self.obs_xy = [v.xy for v in views]
        self.r_fov = seed.fov_radius
        self.d_perc = seed.d_perc
        self.with_corrections = with_corrections
        self.sigma_prior = sigma_prior_m
        keys = sorted({(int(u), int(v)) for view in views for u, v in view.uv})
        self.node_index = {k: i for i, k in enumerate(keys)}
        self.node_keys = keys
        self.obs_node = [np.array([self.node_index[(int(u), int(v))] for u, v in view.uv])
                         for view in views]

    @property
    def n_params(self) -> int:
        base = 6 * self.n_views + 6
        return base + 3 * len(self.node_keys) if self.with_corrections else base

    def pack(self, poses, model: DistortionModel, corrections=None) -> np.ndarray:
        x = np.zeros(self.n_params)
        for k, pose in enumerate(poses):
            x[6 * k:6 * k + 3] = pose.rvec
            x[6 * k + 3:6 * k + 6] = pose.tvec
        base = 6 * self.n_views
        x[base:base + 6] = [model.focal_length, model.principal_point[0],
                            model.principal_point[1], model.k1, model.k2, model.k3]
        if self.with_corrections and corrections:
            for key, val in corrections.items():
                i = self.node_index[key]
                x[base + 6 + 3 * i:base + 9 + 3 * i] = val
        return x

    def unpack(self, x: np.ndarray):
        poses = [Pose(rvec=tuple(x[6 * k:6 * k + 3]),
                      tvec=tuple(x[6 * k + 3:6 * k + 6]))
                 for k in range(self.n_views)]
        base = 6 * self.n_views
        f, cx, cy, k1, k2, k3 = x[base:base + 6]
        model = DistortionModel(focal_length=f, principal_point=(cx, cy),
                                k1=k1, k2=k2, k3=k3, d_perc=self.d_perc,
                                fov_radius=self.r_fov)
        corrections = {}
        if self.with_corrections:
            for key, i in self.node_index.items():
                c = x[base + 6 + 3 * i:base + 9 + 3 * i]
                corrections[key] = c.copy()
        return poses, model, corrections

    def node_points(self, x: np.ndarray) -> np.ndarray:
        pts = np.array([[u * self.spec.pitch_m, v * self.spec.pitch_m, 0.0]
                        for (u, v) in self.node_keys])
        if self.with_corrections:
            base = 6 * self.n_views + 6
            pts = pts + x[base:].reshape(-1, 3)
        return pts

    def residual_jac(self, x: np.ndarray, want_jac: bool):
        base = 6 * self.n_views
        f, cx, cy, k1, k2, k3 = x[base:base + 6]
        pts_all = self.node_points(x)
        n_obs = sum(len(o) for o in self.obs_node)
        n_res = 2 * n_obs + (3 * len(self.node_keys) if self.with_corrections else 0)
        r = np.zeros(n_res)
        jac = np.zeros((n_res, self.n_params)) if want_jac else None
        row = 0
        for k in range(self.n_views):
            rvec = x[6 * k:6 * k + 3]
            tvec = x[6 * k + 3:6 * k + 6]
            rot = rodrigues(rvec)
            idx = self.obs_node[k]
            pts = pts_all[idx]
            proj, jblocks = _project_with_jac(
                f, cx, cy, (k1, k2, k3), self.r_fov, rot, rvec, tvec, pts,
                want_jac)
            res = proj - self.obs_xy[k]
            rows = slice(row, row + 2 * len(idx))
            r[rows] = res.ravel()
            if want_jac:
                jr = jac[rows].reshape(len(idx), 2, self.n_params)
                jr[:, :, 6 * k:6 * k + 3] = jblocks["rvec"]
                jr[:, :, 6 * k + 3:6 * k + 6] = jblocks["tvec"]
                for col, name in enumerate(["f", "cx", "cy", "k1", "k2", "k3"]):
                    jr[:, :, base + col] = jblocks[name]
                if self.with_corrections:
                    cols = base + 6 + 3 * idx[:, None] + np.arange(3)[None, :]
                    for n in range(len(idx)):
                        jr[n, :, cols[n]] = jblocks["point"][n].T
            row += 2 * len(idx)
        if self.with_corrections:
            corr = x[base + 6:]
            r[row:] = corr / self.sigma_prior
            if want_jac:
                jac[row:, base + 6:] = np.eye(3 * len(self.node_keys)) / self.sigma_prior
        return r, jac

    def stage_mask(self, stage: str) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        mask[:6 * self.n_views] = True
        base = 6 * self.n_views
        if stage in ("pose+fc", "pose+fc+k", "all"):
            mask[base:base + 3] = True
        if stage in ("pose+fc+k", "all"):
            mask[base + 3:base + 6] = True
        if stage == "all" and self.with_corrections:
            mask[base + 6:] = True
        return mask


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    def normalize(p):
        mean = p.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(p - mean, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * mean[0]],
                      [0, scale, -scale * mean[1]],
                      [0, 0, 1.0]])
        return t
    ts, td = normalize(src), normalize(dst)
    s = (np.column_stack([src, np.ones(len(src))]) @ ts.T)[:, :2]
    d = (np.column_stack([dst, np.ones(len(dst))]) @ td.T)[:, :2]
    a = []
    for (xs, ys), (xd, yd) in zip(s, d):
        a.append([-xs, -ys, -1, 0, 0, 0, xd * xs, xd * ys, xd])
        a.append([0, 0, 0, -xs, -ys, -1, yd * xs, yd * ys, yd])
    _, _, vt = np.linalg.svd(np.asarray(a))
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    return h / h[2, 2]


def pose_from_nodes(view: GridNodeSet, spec: TargetSpec,
                    seed: DistortionModel) -> Pose:
    """Zhang-style planar pose initialization from one view."""
    if len(view) < 4:
        raise DataError("need at least 4 nodes for pose initialization")
    src = view.uv.astype(np.float64) * spec.pitch_m
    und = undistort(seed, view.xy)
    pp = np.asarray(seed.principal_point)
    dst = (und - pp) / seed.focal_length
    h = _homography(src, dst)
    lam = 1.0 / np.linalg.norm(h[:, 0])
    if h[2, 2] * lam < 0:  # target must sit in front of the camera
        lam = -lam
    r1 = lam * h[:, 0]
    r2 = lam * h[:, 1]
    t = lam * h[:, 2]
    r3 = np.cross(r1, r2)
    rot_raw = np.column_stack([r1, r2, r3])
    u, _, vt = np.linalg.svd(rot_raw)
    rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    # axis-angle from the orthonormalized rotation
    angle = np.arccos(np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0))
    if angle < 1e-12:
        rvec = np.zeros(3)
    else:
        axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0],
                         rot[1, 0] - rot[0, 1]])
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            # angle near pi: extract axis from the symmetric part
            w, v = np.linalg.eigh(rot)
            axis = v[:, np.argmax(w)]
            rvec = axis * angle
        else:
            rvec = axis / norm * angle
    return Pose(rvec=tuple(rvec), tvec=tuple(t))


def fit_camera(views: list[GridNodeSet], spec: TargetSpec,
               seed: DistortionModel, stages: tuple = STAGES,
               options: LMOptions = LMOptions(),
               poses0: list | None = None) -> CameraSolution:
    """Staged LMA calibration from multiple views of the target.

    Node sets must be index-consistent across views only if node
    refinement will follow; for camera parameters alone a per-view
    lattice re-labeling is absorbed by that view's pose.
    """
    if len(views) < 3:
        raise DataError("need at least 3 views")
    for v in views:
        if len(v) < 20:
            raise DataError("each view needs at least 20 nodes")
    problem = _Problem(views, spec, seed, with_corrections=False)
    if poses0 is None:
        poses0 = [pose_from_nodes(v, spec, seed) for v in views]
    x = problem.pack(poses0, seed)
    stage_costs = []
    converged = True
    for stage in stages:
        x, cost, ok = levenberg_marquardt(problem.residual_jac, x,
                                          problem.stage_mask(stage), options)
        stage_costs.append(cost)
        converged = converged and ok
    poses, model, _ = problem.unpack(x)
    solution = CameraSolution(model=model, poses=poses, mre=0.0,
                              converged=converged, stage_costs=stage_costs)
    solution.mre = mre(solution, views, spec)
    return solution


def refine_target_nodes(solution: CameraSolution, views: list[GridNodeSet],
                        spec: TargetSpec, sigma_prior_m: float = 0.004,
                        options: LMOptions = LMOptions()) -> CameraSolution:
    """Joint LMA over cameras and per-node 3D corrections.

    Requires several views sharing nodes (a single view leaves the
    corrections unobservable). Corrections are regularized toward the
    ideal lattice; if the refined solution somehow ends with a larger
    MRE the original is returned untouched (with a cleared flag).
    """
    if len(views) < 3:
        raise DataError("node refinement needs at least 3 views")
    if not solution.converged:
        raise DataError("refine requires a converged camera solution")
    problem = _Problem(views, spec, solution.model, with_corrections=True,
                       sigma_prior_m=sigma_prior_m)
    shared = sum(1 for key in problem.node_keys
                 if sum(1 for v in views
                        if ((v.uv[:, 0] == key[0]) & (v.uv[:, 1] == key[1])).any()) >= 2)
    if shared < 10:
        raise DataError("views share too few nodes for refinement")
    x = problem.pack(solution.poses, solution.model)
    x, cost, ok = levenberg_marquardt(problem.residual_jac, x,
                                      problem.stage_mask("all"), options)
    poses, model, corrections = problem.unpack(x)
    refined = CameraSolution(model=model, poses=poses, mre=0.0,
                             converged=solution.converged and ok,
                             corrections=corrections,
                             stage_costs=solution.stage_costs + [cost])
    refined.mre = mre(refined, views, spec)
    if refined.mre > solution.mre:
        return replace(solution, converged=solution.converged and ok)
    return refined


def mre(solution: CameraSolution, views: list[GridNodeSet],
        spec: TargetSpec) -> float:
    """Mean Euclidean reprojection error over all nodes and views."""
    total = 0.0
    count = 0
    m = solution.model
    for pose, view in zip(solution.poses, views):
        if len(view) == 0:
            continue
        corr = np.array([solution.corrections.get((int(u), int(v)), np.zeros(3))
                         for u, v in view.uv])
        pts = np.column_stack([view.uv.astype(np.float64) * spec.pitch_m,
                               np.zeros(len(view))]) + corr
        proj, _ = _project_with_jac(
            m.focal_length, m.principal_point[0], m.principal_point[1],
            (m.k1, m.k2, m.k3), m.fov_radius, pose.rotation, pose.rvec,
            pose.translation, pts, False)
        total += float(np.sum(np.linalg.norm(proj - view.xy, axis=1)))
        count += len(view)
    if count == 0:
        raise DataError("no nodes to evaluate")
    return total / count


# --- solution file format (plain text, named fields) --------------------------


def save_solution(path, solution: CameraSolution) -> None:
    lines = ["qstereo-camera-solution v1"]
    m = solution.model
    lines.append(f"focal_length = {m.focal_length!r}")
    lines.append(f"principal_point = {m.principal_point[0]!r} {m.principal_point[1]!r}")
    lines.append(f"k1 = {m.k1!r}")
    lines.append(f"k2 = {m.k2!r}")
    lines.append(f"k3 = {m.k3!r}")
    lines.append(f"d_perc = {m.d_perc!r}")
    lines.append(f"fov_radius = {m.fov_radius!r}")
    lines.append(f"mre = {solution.mre!r}")
    lines.append(f"converged = {int(solution.converged)}")
    lines.append(f"views = {len(solution.poses)}")
    for k, pose in enumerate(solution.poses):
        rv = " ".join(repr(float(c)) for c in pose.rvec)
        tv = " ".join(repr(float(c)) for c in pose.tvec)
        lines.append(f"view{k}_rvec = {rv}")
        lines.append(f"view{k}_tvec = {tv}")
    lines.append(f"corrections = {len(solution.corrections)}")
    for (u, v), c in sorted(solution.corrections.items()):
        lines.append(f"node {u} {v} {c[0]!r} {c[1]!r} {c[2]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_solution(path) -> CameraSolution:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or not text[0].startswith("qstereo-camera-solution"):
        raise DataError(f"{path}: not a camera solution file")
    fields = {}
    nodes = {}
    for line in text[1:]:
        if line.startswith("node "):
            parts = line.split()
            nodes[(int(parts[1]), int(parts[2]))] = np.array(
                [float(parts[3]), float(parts[4]), float(parts[5])])
        elif "=" in line:
            key, val = line.split("=", 1)
            fields[key.strip()] = val.strip()
    model = DistortionModel(
        focal_length=float(fields["focal_length"]),
        principal_point=tuple(float(c) for c in fields["principal_point"].split()),
        k1=float(fields["k1"]), k2=float(fields["k2"]), k3=float(fields["k3"]),
        d_perc=float(fields["d_perc"]), fov_radius=float(fields["fov_radius"]))
    poses = []
    for k in range(int(fields["views"])):
        rv = tuple(float(c) for c in fields[f"view{k}_rvec"].split())
        tv = tuple(float(c) for c in fields[f"view{k}_tvec"].split())
        poses.append(Pose(rvec=rv, tvec=tv))
    return CameraSolution(model=model, poses=poses, mre=float(fields["mre"]),
                          converged=bool(int(fields["converged"])),
                          corrections=nodes)
