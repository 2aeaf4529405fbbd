"""Path-integral attribution of predictive entropy to pixels.

Three path families are supported:

* straight paths from a constant fiducial (black, white, or their average),
* straight paths from a counterfactual fiducial found by latent-space
  optimization against the classifier,
* generative paths decoded from a straight latent segment between the
  counterfactual fiducial and the input's latent reconstruction, finished by
  a short straight correction segment from the reconstruction to the input.

Every attribution is the composite-trapezoid evaluation of
``sum_k w_k * dF/dpixel(point_k) * tangent_k`` where ``F`` is the predictive
entropy (deterministic, or of the dropout posterior predictive when a draw
set is supplied).  Tangents of generative segments are exact decoder
directional derivatives along the latent displacement; straight-segment
tangents are the constant endpoint difference.  Paths carry points, tangents
and quadrature weights together; the junction node between two segments is
duplicated because its tangent differs on each side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .models import Classifier, classifier_forward
from .uncertainty import PosteriorSamples, entropy_rows

FIDUCIAL_KINDS = ("black", "white", "black+white-average", "counterfactual")


@dataclass
class FiducialSpec:
    kind: str = "counterfactual"
    lam: float = 100.0
    lr: float = 0.05
    entropy_target: float = 0.05
    max_iters: int = 2000
    rel_tol: float = 1e-5
    window: int = 10

    def __post_init__(self):
        if self.kind not in FIDUCIAL_KINDS:
            raise ValueError(f"unknown fiducial kind {self.kind!r}")
        if self.lam <= 0 or self.lr <= 0 or self.entropy_target <= 0:
            raise ValueError("penalty, learning rate, and entropy target must be > 0")


@dataclass
class PathSpec:
    mode: str = "generative"  # or "straight"
    bins: int = 50
    include_correction: bool = True

    def __post_init__(self):
        if self.mode not in ("generative", "straight"):
            raise ValueError(f"unknown path mode {self.mode!r}")
        if self.bins < 2:
            raise ValueError("need at least 2 quadrature bins")


@dataclass
class DescentConfig:
    lr: float = 0.05
    max_iters: int = 2000
    rel_tol: float = 1e-5
    window: int = 10


@dataclass
class LatentPoint:
    z: np.ndarray
    achieved_entropy: float | None = None
    target_missed: bool = False
    predicted_class: int | None = None
    iterations: int = 0


@dataclass
class AttributionMap:
    """Signed per-pixel importances (nats) plus provenance metadata."""

    values: np.ndarray
    metadata: dict = field(default_factory=dict)


@dataclass
class IntegrationPath:
    """Quadrature-ready path: one row per node, tangents and weights aligned."""

    points: np.ndarray    # (K, n)
    tangents: np.ndarray  # (K, n) dδ/dα under each segment's own α in [0, 1]
    weights: np.ndarray   # (K,) composite-trapezoid weights
    mode: str = "straight"
    fiducial_kind: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.tangents = np.asarray(self.tangents, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.shape != self.tangents.shape:
            raise ValueError("tangent/point count mismatch")
        if len(self.weights) != len(self.points):
            raise ValueError("weight/point count mismatch")

    def __len__(self):
        return len(self.points)


def mean_abs_distance(a, b) -> dc.Tensor:
    """Mean absolute pixel difference, the default image metric."""
    diff = dc.subtract(a, b)
    return dc.mean(dc.add(dc.relu(diff), dc.relu(dc.multiply(diff, -1.0))))


def latent_prior(z: dc.Tensor, latent_dim: int) -> dc.Tensor:
    """Negative latent log-density up to constants: sum z^2 / (2 m)."""
    return dc.multiply(dc.sum(dc.multiply(z, z)), 0.5 / latent_dim)


def counterfactual_loss(c: Classifier, v, z, x, target_class, lam,
                        distance=mean_abs_distance) -> dc.Tensor:
    """Penalty-form fiducial objective; with lam=0 it is the reconstruction
    objective exactly."""
    z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
    decoded = v.decode_tensor(z)
    loss = dc.add(distance(decoded, x), latent_prior(z, v.latent_dim))
    if lam != 0.0:
        probs = c.forward_tensor(decoded)
        onehot = np.zeros(probs.shape[-1])
        onehot[target_class] = 1.0
        class_prob = dc.sum(dc.multiply(probs, onehot))
        loss = dc.add(loss, dc.multiply(dc.log(class_prob), -lam))
    return loss


def reconstruction_loss(v, z, x, distance=mean_abs_distance) -> dc.Tensor:
    z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
    return dc.add(distance(v.decode_tensor(z), x), latent_prior(z, v.latent_dim))


def _descend(loss_of, z0, lr, max_iters, rel_tol, window):
    """Adam descent on ``loss_of(z_leaf)``; returns (best_z, best_loss, iters).

    The best-loss iterate over the whole trajectory (start and final point
    included) is returned.  The loop stops when the relative loss change over
    ``window`` iterations falls below ``rel_tol`` (``rel_tol=0`` disables the
    early stop).
    """
    from .models import AdamState, adam_step

    z = np.array(z0, dtype=np.float64, copy=True)
    state = AdamState.for_params([z])
    best_z, best_loss = z.copy(), math.inf
    losses = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        leaf = dc.Tensor(z)
        loss = loss_of(leaf)
        dc.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise dc.NonFiniteError("latent descent diverged to a non-finite loss")
        losses.append(value)
        if value < best_loss:
            best_loss, best_z = value, z.copy()
        if (rel_tol > 0 and len(losses) > window
                and abs(losses[-1] - losses[-1 - window])
                < rel_tol * max(abs(losses[-1 - window]), 1e-12)):
            break
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(z)
        adam_step([z], [grad], state, lr)
    final = loss_of(dc.Tensor(z)).item()
    if final < best_loss:
        best_loss, best_z = final, z.copy()
    return best_z, best_loss, iterations


def find_counterfactual_fiducial(c: Classifier, v, x, spec: FiducialSpec,
                                 distance=mean_abs_distance) -> LatentPoint:
    """Search latent space for a same-class, near-zero-entropy fiducial.

    Starts from the encoder mean and minimizes reconstruction distance plus
    the latent prior, with a penalty of ``-lam * log f_c`` pushing the decoded
    image's predicted probability for the input's class toward one.  If the
    returned point misses the entropy target or flips the argmax it is flagged
    ``target_missed`` rather than discarded.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    probs_x = classifier_forward(c, x)
    target_class = int(np.argmax(probs_x))
    z_start = v.encode_mean(x)

    def loss_of(leaf):
        return counterfactual_loss(c, v, leaf, x, target_class, spec.lam, distance)

    best_z, _, iterations = _descend(
        loss_of, z_start, spec.lr, spec.max_iters, spec.rel_tol, spec.window
    )
    decoded = v.decode(best_z)
    probs0 = classifier_forward(c, decoded)
    achieved = float(entropy_rows(probs0[None, :])[0])
    missed = (int(np.argmax(probs0)) != target_class) or (achieved > spec.entropy_target)
    return LatentPoint(
        z=best_z,
        achieved_entropy=achieved,
        target_missed=missed,
        predicted_class=target_class,
        iterations=iterations,
    )


def find_reconstruction(v, x, config: DescentConfig | None = None,
                        distance=mean_abs_distance) -> LatentPoint:
    """Latent reconstruction of ``x``: minimize distance plus latent prior.

    Guaranteed never to reconstruct worse (under ``distance``) than the
    encoder-mean starting point: if the descended point does, the start is
    returned instead.
    """
    config = config or DescentConfig()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z_start = v.encode_mean(x)

    def loss_of(leaf):
        return reconstruction_loss(v, leaf, x, distance)

    best_z, _, iterations = _descend(
        loss_of, z_start, config.lr, config.max_iters, config.rel_tol, config.window
    )

    def recon_error(z):
        return distance(v.decode_tensor(dc.Tensor(z)), x).item()

    if recon_error(best_z) > recon_error(z_start):
        best_z = np.array(z_start, dtype=np.float64, copy=True)
    return LatentPoint(z=best_z, iterations=iterations)


def _trapezoid_weights(num_nodes):
    h = 1.0 / (num_nodes - 1)
    w = np.full(num_nodes, h)
    w[0] = w[-1] = h / 2.0
    return w


def straight_path(x0, x, bins, fiducial_kind=None) -> IntegrationPath:
    """Uniform straight-line path from ``x0`` to ``x`` with exact endpoints."""
    if bins < 2:
        raise ValueError("need at least 2 quadrature bins")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    alphas = np.arange(bins + 1) / bins
    points = x0[None, :] + alphas[:, None] * (x - x0)[None, :]
    points[0] = x0
    points[-1] = x
    tangents = np.broadcast_to(x - x0, points.shape).copy()
    return IntegrationPath(
        points=points,
        tangents=tangents,
        weights=_trapezoid_weights(bins + 1),
        mode="straight",
        fiducial_kind=fiducial_kind,
    )


def path_points(v, z0, z, x, spec: PathSpec | None = None) -> IntegrationPath:
    """Build the integration path between latent fiducial and input image.

    Generative mode decodes ``bins + 1`` evenly spaced latent points from
    ``z0`` to ``z`` (tangents are exact decoder directional derivatives along
    ``z - z0``), then, when the correction segment is enabled, appends a
    straight segment from the decoded reconstruction to ``x`` sampled with
    ``ceil(bins / 2)`` additional points.  Straight mode decodes ``z0`` once
    and interpolates linearly to ``x``.
    """
    spec = spec or PathSpec()
    z0 = np.asarray(getattr(z0, "z", z0), dtype=np.float64).reshape(-1)
    z = np.asarray(getattr(z, "z", z), dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)

    if spec.mode == "straight":
        path = straight_path(v.decode(z0), x, spec.bins, fiducial_kind="counterfactual")
        return path

    alphas = np.arange(spec.bins + 1) / spec.bins
    latents = z0[None, :] + alphas[:, None] * (z - z0)[None, :]
    latents[0] = z0
    latents[-1] = z
    leaf = dc.Tensor(latents)
    leaf.tangent = np.broadcast_to(z - z0, latents.shape).copy()
    decoded = v.decode_tensor(leaf)
    points = decoded.data
    tangents = decoded.tangent
    weights = _trapezoid_weights(spec.bins + 1)

    if spec.include_correction:
        correction = straight_path(points[-1], x, max(2, math.ceil(spec.bins / 2)))
        points = np.vstack([points, correction.points])
        tangents = np.vstack([tangents, correction.tangents])
        weights = np.concatenate([weights, correction.weights])

    return IntegrationPath(
        points=points,
        tangents=tangents,
        weights=weights,
        mode="generative",
        fiducial_kind="counterfactual",
    )


def integrate_along_path(path: IntegrationPath, values_and_grads):
    """Composite-trapezoid line integral of an arbitrary scalar field.

    ``values_and_grads(points)`` must return the field value at every node,
    (K,), and its pixel gradient rows, (K, n).  Returns the per-pixel
    attribution, the completeness residual against the endpoint difference,
    and the two endpoint values.
    """
    values, grads = values_and_grads(path.points)
    attr = np.einsum("k,kn,kn->n", path.weights, grads, path.tangents)
    f_start, f_end = float(values[0]), float(values[-1])
    residual = abs(float(attr.sum()) - (f_end - f_start))
    return attr, residual, f_start, f_end


def _deterministic_entropy_field(c: Classifier):
    def values_and_grads(points):
        leaf = dc.Tensor(points)
        probs = c.forward_tensor(leaf)
        total = dc.multiply(dc.sum(dc.multiply(probs, dc.log(probs))), -1.0)
        dc.backward(total)
        return entropy_rows(probs.data), leaf.grad

    return values_and_grads


def _mc_entropy_fields(c: Classifier, samples: PosteriorSamples):
    """Tape evaluations of posterior-predictive and mean-per-draw entropy.

    One draw set is shared across every path point, so both fields are smooth
    in the path parameter.  Returns a closure computing, for a stack of
    points: (total values, total grads, aleatoric values, aleatoric grads).
    """
    n_draws = len(samples)

    def fields(points):
        leaf = dc.Tensor(points)
        prob_sum = None
        draw_entropy_sum = None
        aleatoric_values = np.zeros(len(points))
        for draw in samples.masks:
            probs_i = c.forward_tensor(leaf, draw)
            p_log_p = dc.sum(dc.multiply(probs_i, dc.log(probs_i)))
            prob_sum = probs_i if prob_sum is None else dc.add(prob_sum, probs_i)
            draw_entropy_sum = (
                p_log_p if draw_entropy_sum is None else dc.add(draw_entropy_sum, p_log_p)
            )
            aleatoric_values += entropy_rows(probs_i.data)
        p_bar = dc.multiply(prob_sum, 1.0 / n_draws)
        total_scalar = dc.multiply(dc.sum(dc.multiply(p_bar, dc.log(p_bar))), -1.0)
        aleatoric_scalar = dc.multiply(draw_entropy_sum, -1.0 / n_draws)

        dc.backward(total_scalar)
        total_grads = np.array(leaf.grad, copy=True)
        for node in dc.topo_order(total_scalar):
            node.grad = None
        dc.backward(aleatoric_scalar)
        aleatoric_grads = np.array(leaf.grad, copy=True)

        total_values = entropy_rows(p_bar.data)
        aleatoric_values /= n_draws
        return total_values, total_grads, aleatoric_values, aleatoric_grads

    return fields


def attribute_entropy(c: Classifier, path: IntegrationPath,
                      samples: PosteriorSamples | None = None) -> AttributionMap:
    """Per-pixel entropy attribution along ``path``.

    With ``samples`` the attributed quantity is the entropy of the dropout
    posterior predictive; without, the deterministic predictive entropy.
    The completeness residual |sum attr - (F(end) - F(start))| is recorded
    in the metadata.
    """
    if len(path) < 3:
        raise ValueError("need at least 3 path points")
    if samples is None:
        field_fn = _deterministic_entropy_field(c)
    else:
        mc_fields = _mc_entropy_fields(c, samples)

        def field_fn(points):
            total_values, total_grads, _, _ = mc_fields(points)
            return total_values, total_grads

    attr, residual, f_start, f_end = integrate_along_path(path, field_fn)
    return AttributionMap(
        values=attr,
        metadata={
            "fiducial": path.fiducial_kind,
            "mode": path.mode,
            "entropy_kind": "posterior-predictive" if samples else "deterministic",
            "completeness_residual": residual,
            "f_start": f_start,
            "f_end": f_end,
        },
    )


def attribute_bayesian(c: Classifier, path: IntegrationPath,
                       samples: PosteriorSamples):
    """(full, aleatoric, epistemic) attribution maps from one shared draw set.

    The epistemic map is the exact per-pixel difference of the other two, so
    the three always add up.  With a single draw the full and aleatoric maps
    coincide and the epistemic map is identically zero.
    """
    if len(path) < 3:
        raise ValueError("need at least 3 path points")
    if len(samples) < 1:
        raise ValueError("need at least one posterior draw")
    fields = _mc_entropy_fields(c, samples)
    total_values, total_grads, alea_values, alea_grads = fields(path.points)

    def as_map(values, grads, label):
        attr = np.einsum("k,kn,kn->n", path.weights, grads, path.tangents)
        f_start, f_end = float(values[0]), float(values[-1])
        residual = abs(float(attr.sum()) - (f_end - f_start))
        return AttributionMap(
            values=attr,
            metadata={
                "fiducial": path.fiducial_kind,
                "mode": path.mode,
                "component": label,
                "completeness_residual": residual,
                "f_start": f_start,
                "f_end": f_end,
            },
        )

    full = as_map(total_values, total_grads, "full")
    aleatoric = as_map(alea_values, alea_grads, "aleatoric")
    epi_values = full.values - aleatoric.values
    epi_start = full.metadata["f_start"] - aleatoric.metadata["f_start"]
    epi_end = full.metadata["f_end"] - aleatoric.metadata["f_end"]
    epistemic = AttributionMap(
        values=epi_values,
        metadata={
            "fiducial": path.fiducial_kind,
            "mode": path.mode,
            "component": "epistemic",
            "completeness_residual": abs(float(epi_values.sum()) - (epi_end - epi_start)),
            "f_start": epi_start,
            "f_end": epi_end,
        },
    )
    return full, aleatoric, epistemic


def ig_attribute(c: Classifier, x, fiducial: FiducialSpec, bins, v=None) -> AttributionMap:
    """Integrated gradients of the deterministic entropy on a straight path.

    Fiducial kinds: constant black or white images, their averaged pair of
    maps, or a counterfactual fiducial searched in latent space (requires the
    generative model ``v``).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)

    if fiducial.kind == "black":
        return attribute_entropy(c, straight_path(np.zeros_like(x), x, bins, "black"))
    if fiducial.kind == "white":
        return attribute_entropy(c, straight_path(np.ones_like(x), x, bins, "white"))
    if fiducial.kind == "black+white-average":
        black = attribute_entropy(c, straight_path(np.zeros_like(x), x, bins, "black"))
        white = attribute_entropy(c, straight_path(np.ones_like(x), x, bins, "white"))
        values = 0.5 * (black.values + white.values)
        f_start = 0.5 * (black.metadata["f_start"] + white.metadata["f_start"])
        f_end = black.metadata["f_end"]
        return AttributionMap(
            values=values,
            metadata={
                "fiducial": "black+white-average",
                "mode": "straight",
                "entropy_kind": "deterministic",
                "completeness_residual": abs(float(values.sum()) - (f_end - f_start)),
                "f_start": f_start,
                "f_end": f_end,
            },
        )
    if fiducial.kind == "counterfactual":
        if v is None:
            raise ValueError("counterfactual fiducial requires the generative model")
        z0 = find_counterfactual_fiducial(c, v, x, fiducial)
        result = attribute_entropy(c, straight_path(v.decode(z0.z), x, bins, "counterfactual"))
        result.metadata["fiducial_entropy"] = z0.achieved_entropy
        result.metadata["fiducial_target_missed"] = z0.target_missed
        return result
    raise ValueError(f"unknown fiducial kind {fiducial.kind!r}")
