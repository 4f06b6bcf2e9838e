"""Layer composition: a full deep convolutional GMM instance.

A model is an ordered stack of folding, pooling, GMM and (at most one,
final) linear classifier layers.  Training is end-to-end but
gradient-isolated: one forward pass per batch, then every GMM layer takes
one SGD step on its own smoothed max-component loss while responsibilities
flow forward as constants; the classifier takes one cross-entropy step on
the top responsibilities.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import gmm as G
from .errors import (ArchitectureError, CapabilityError, DomainError,
                     ShapeError, TrainingError)
from .layers import (FoldingSpec, LinearParams, PoolingSpec, fold_backward,
                     fold_forward, init_linear, linear_forward, linear_invert,
                     linear_train_step, pool_forward, unpool)
from .tensor import Tensor4, logsumexp_rows

__all__ = [
    "GmmLayerSpec", "LinearLayerSpec", "LayerSpec", "LikelihoodStats",
    "DcgmmModel", "TrainReport", "validate_architecture", "build_model",
    "parse_architecture", "format_architecture", "gmm_layer_forward",
    "gmm_layer_loss", "is_outlier",
]


@dataclass(frozen=True)
class GmmLayerSpec:
    """A convolutional GMM layer with k components on a periodic grid."""

    k: int
    grid: tuple[int, int] | None = None

    def resolved_grid(self) -> tuple[int, int]:
        if self.grid is not None:
            return self.grid
        side = int(round(math.sqrt(self.k)))
        if side * side != self.k:
            raise ArchitectureError(
                f"K={self.k} is not square; specify the grid as G(ghxgw)")
        return (side, side)


@dataclass(frozen=True)
class LinearLayerSpec:
    """Final classifier layer mapping flattened responsibilities to classes."""

    n_classes: int


LayerSpec = Union[FoldingSpec, PoolingSpec, GmmLayerSpec, LinearLayerSpec]


_ARCH_TOKEN = re.compile(r"^([FPGC])\(([^)]*)\)$")


def parse_architecture(text: str) -> list[LayerSpec]:
    """Parse the compact layer notation, e.g. ``F(28,28,1,1);G(25);C(10)``.

    F(fy,fx,dy,dx) folds patches into channels; P(ky,kx[,dy,dx][,avg]) pools
    (max by default, stride defaults to the kernel); G(K) or G(ghxgw) is a
    GMM layer; C(n) the classifier.
    """
    specs: list[LayerSpec] = []
    for token in text.replace(" ", "").split(";"):
        if not token:
            continue
        m = _ARCH_TOKEN.match(token)
        if not m:
            raise ArchitectureError(f"cannot parse layer token {token!r}")
        kind, args = m.group(1), [a for a in m.group(2).split(",") if a]
        if kind == "F":
            if len(args) != 4:
                raise ArchitectureError(f"F takes (fy,fx,dy,dx): {token!r}")
            specs.append(FoldingSpec(*(int(a) for a in args)))
        elif kind == "P":
            mode = "max"
            if args and args[-1] in ("max", "avg", "average"):
                mode = "average" if args[-1].startswith("av") else "max"
                args = args[:-1]
            if len(args) == 2:
                ky, kx = int(args[0]), int(args[1])
                specs.append(PoolingSpec(ky, kx, ky, kx, mode))
            elif len(args) == 4:
                specs.append(PoolingSpec(*(int(a) for a in args), mode))
            else:
                raise ArchitectureError(f"P takes (ky,kx[,dy,dx][,mode]): {token!r}")
        elif kind == "G":
            if len(args) != 1:
                raise ArchitectureError(f"G takes (K) or (ghxgw): {token!r}")
            if "x" in args[0]:
                gh, gw = (int(v) for v in args[0].split("x"))
                specs.append(GmmLayerSpec(gh * gw, (gh, gw)))
            else:
                specs.append(GmmLayerSpec(int(args[0])))
        else:
            if len(args) != 1:
                raise ArchitectureError(f"C takes the class count: {token!r}")
            specs.append(LinearLayerSpec(int(args[0])))
    if not specs:
        raise ArchitectureError("empty architecture string")
    return specs


def format_architecture(specs) -> str:
    """Canonical textual form of a layer stack (inverse of parse)."""
    parts = []
    for s in specs:
        if isinstance(s, FoldingSpec):
            parts.append(f"F({s.fy},{s.fx},{s.dy},{s.dx})")
        elif isinstance(s, PoolingSpec):
            base = f"{s.ky},{s.kx}"
            if (s.dy, s.dx) != (s.ky, s.kx):
                base += f",{s.dy},{s.dx}"
            if s.mode == "average":
                base += ",avg"
            parts.append(f"P({base})")
        elif isinstance(s, GmmLayerSpec):
            gh, gw = s.resolved_grid()
            parts.append(f"G({s.k})" if gh == gw else f"G({gh}x{gw})")
        elif isinstance(s, LinearLayerSpec):
            parts.append(f"C({s.n_classes})")
        else:
            raise ArchitectureError(f"unknown layer spec {s!r}")
    return ";".join(parts)


def validate_architecture(specs, input_shape: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Chain (H, W, C) through the stack; returns the shape at every boundary.

    The returned list has one entry per layer boundary, starting with the
    input shape.  Violations raise :class:`ArchitectureError` naming the
    offending layer index.
    """
    specs = list(specs)
    if not specs:
        raise ArchitectureError("architecture needs at least one layer")
    shapes = [tuple(int(v) for v in input_shape)]
    h, w, c = shapes[0]
    for i, spec in enumerate(specs):
        try:
            if isinstance(spec, FoldingSpec):
                oh, ow = spec.out_hw(h, w)
                h, w, c = oh, ow, c * spec.fy * spec.fx
            elif isinstance(spec, PoolingSpec):
                h, w = spec.out_hw(h, w)
            elif isinstance(spec, GmmLayerSpec):
                spec.resolved_grid()
                c = spec.k
            elif isinstance(spec, LinearLayerSpec):
                if i != len(specs) - 1:
                    raise ArchitectureError("classifier layer must be last")
                h, w, c = 1, 1, spec.n_classes
            else:
                raise ArchitectureError(f"unknown layer spec {spec!r}")
        except (ShapeError, ArchitectureError) as exc:
            raise ArchitectureError(f"layer {i}: {exc}") from exc
        shapes.append((h, w, c))
    if sum(isinstance(s, LinearLayerSpec) for s in specs) > 1:
        raise ArchitectureError("at most one classifier layer is allowed")
    if not any(isinstance(s, GmmLayerSpec) for s in specs):
        raise ArchitectureError("a model needs at least one GMM layer")
    return shapes


@dataclass
class LikelihoodStats:
    """Streaming (one-pass) mean/variance of per-sample layer log-likelihoods."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count > 0 else 0.0

    def update(self, scores: np.ndarray) -> None:
        for s in np.asarray(scores, dtype=np.float64).ravel():
            self.count += 1
            delta = s - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (s - self.mean)

    def copy(self) -> "LikelihoodStats":
        return LikelihoodStats(self.count, self.mean, self.m2)


def is_outlier(score: float, stats: LikelihoodStats, c: float) -> bool:
    """True when the score falls below mean - c * sqrt(var)."""
    if stats.count < 2:
        raise DomainError("outlier threshold needs at least 2 recorded scores")
    return bool(score < stats.mean - c * math.sqrt(stats.var))


def gmm_layer_forward(t: Tensor4, params: G.GmmParams) -> Tensor4:
    """Responsibilities over components for every (n, h, w) position."""
    n, h, w, c = t.shape
    if c != params.dim:
        raise ShapeError(f"GMM layer expects {params.dim} channels, got {c}")
    x = t.array.reshape(-1, c)
    lwd = G.log_weighted_densities_batch(x, params)
    resp = np.exp(lwd - logsumexp_rows(lwd)[:, None])
    return Tensor4(resp.reshape(n, h, w, params.n_components))


def gmm_layer_loss(t: Tensor4, params: G.GmmParams, g: np.ndarray) -> float:
    """Smoothed max-component loss averaged over batch and positions."""
    n, h, w, c = t.shape
    return G.smoothed_loss(t.array.reshape(-1, c), params, g)


@dataclass
class TrainReport:
    """Per-layer losses for one training step."""

    gmm_losses: dict[int, float] = field(default_factory=dict)
    ce_loss: float | None = None


class DcgmmModel:
    """A trainable layered mixture model.

    One writer at a time during training; inference methods are read-only.
    """

    def __init__(self, specs, input_shape, gmm_params, annealing, linear,
                 stats, eps_by_layer, eps_classifier, warmup_fraction=0.5):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.shapes = validate_architecture(self.specs, self.input_shape)
        self.gmm_params: dict[int, G.GmmParams] = gmm_params
        self.annealing: dict[int, G.AnnealingState] = annealing
        self.linear: LinearParams | None = linear
        self.stats: dict[int, LikelihoodStats] = stats
        self.eps_by_layer: dict[int, float] = eps_by_layer
        self.eps_classifier = eps_classifier
        self.warmup_fraction = warmup_fraction
        self._plan_total: int | None = None
        self._plan_step = 0

    # -- structure ---------------------------------------------------------

    @property
    def gmm_layer_indices(self) -> list[int]:
        return sorted(self.gmm_params)

    @property
    def top_gmm_index(self) -> int:
        return self.gmm_layer_indices[-1]

    @property
    def linear_index(self) -> int | None:
        for i, s in enumerate(self.specs):
            if isinstance(s, LinearLayerSpec):
                return i
        return None

    @property
    def n_classes(self) -> int | None:
        return self.specs[self.linear_index].n_classes if self.linear else None

    def copy(self) -> "DcgmmModel":
        m = DcgmmModel(
            self.specs, self.input_shape,
            {i: p.copy() for i, p in self.gmm_params.items()},
            {i: s.copy() for i, s in self.annealing.items()},
            self.linear.copy() if self.linear else None,
            {i: s.copy() for i, s in self.stats.items()},
            dict(self.eps_by_layer), self.eps_classifier, self.warmup_fraction)
        m._plan_total = self._plan_total
        m._plan_step = self._plan_step
        return m

    # -- forward pass ------------------------------------------------------

    def _check_input(self, batch: Tensor4) -> None:
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape[1:]} does not match model input "
                f"{self.input_shape}")

    def forward(self, batch: Tensor4) -> list[Tensor4]:
        """Activations entering every layer plus the final output (len+1)."""
        self._check_input(batch)
        acts = [batch]
        cur = batch
        for i, spec in enumerate(self.specs):
            if isinstance(spec, FoldingSpec):
                cur = fold_forward(cur, spec)
            elif isinstance(spec, PoolingSpec):
                cur = pool_forward(cur, spec)
            elif isinstance(spec, GmmLayerSpec):
                cur = gmm_layer_forward(cur, self.gmm_params[i])
            else:
                probs = linear_forward(cur, self.linear)
                cur = Tensor4(probs.reshape(len(probs), 1, 1, -1))
            acts.append(cur)
        return acts

    # -- training ----------------------------------------------------------

    def begin_training(self, total_iterations: int) -> None:
        """Declare the planned iteration count of the coming training phase.

        Enables the centroids-first warmup: precision updates stay frozen for
        the first ``warmup_fraction`` of the declared iterations.
        """
        self._plan_total = int(total_iterations)
        self._plan_step = 0

    def _warmup_active(self) -> bool:
        return (self._plan_total is not None
                and self._plan_step < self.warmup_fraction * self._plan_total)

    def train_step(self, batch: Tensor4, labels: np.ndarray | None = None) -> TrainReport:
        """One end-to-end step: every GMM layer and the classifier update once."""
        acts = self.forward(batch)
        report = TrainReport()
        update_chol = not self._warmup_active()
        for i in self.gmm_layer_indices:
            params = self.gmm_params[i]
            state = self.annealing[i]
            inp = acts[i]
            n, h, w, c = inp.shape
            x = inp.array.reshape(-1, c)
            g = G.annealing_mask(params, state)
            loss, grads, max_ll = G.loss_gradients_with_stats(x, params, g)
            eps = self.eps_by_layer.get(i, 0.0)
            if eps > 0.0:
                try:
                    self.gmm_params[i] = G.apply_gradients(
                        params, grads, eps, state.iteration, update_chol_d=update_chol)
                except TrainingError as exc:
                    raise TrainingError(f"layer {i}: {exc}") from exc
                G.update_annealing(state, loss)
            self.stats[i].update(max_ll.reshape(n, h * w).mean(axis=1))
            report.gmm_losses[i] = loss
        li = self.linear_index
        if li is not None and labels is not None and self.eps_classifier > 0.0:
            self.linear, report.ce_loss = linear_train_step(
                acts[li], labels, self.linear, self.eps_classifier)
        self._plan_step += 1
        return report

    def reset_annealing(self, factor: float) -> None:
        """Re-open every layer's annealing radius to factor * sigma0 (< 0: no-op)."""
        for state in self.annealing.values():
            state.reset_sigma(factor)

    # -- inference ---------------------------------------------------------

    def class_probabilities(self, batch: Tensor4) -> np.ndarray:
        if self.linear is None:
            raise CapabilityError("model has no classifier layer")
        acts = self.forward(batch)
        return acts[-1].array.reshape(len(batch), -1)

    def classify(self, batch: Tensor4) -> np.ndarray:
        """Predicted class index per sample (ties to the lowest index)."""
        return np.argmax(self.class_probabilities(batch), axis=1)

    # -- outlier detection ---------------------------------------------------

    def outlier_scores(self, batch: Tensor4, layer_index: int | None = None,
                       per_position: bool = False) -> np.ndarray:
        """Per-sample max-component log-likelihood at a GMM layer.

        Convolutional layers aggregate by the mean over positions unless
        ``per_position`` is set, in which case an (n, h*w) array is returned.
        """
        layer_index = self.top_gmm_index if layer_index is None else layer_index
        if layer_index not in self.gmm_params:
            raise CapabilityError(f"layer {layer_index} is not a GMM layer")
        if self.stats[layer_index].count == 0:
            raise CapabilityError(
                f"layer {layer_index} has no recorded likelihood statistics")
        acts = self.forward(batch)
        inp = acts[layer_index]
        n, h, w, c = inp.shape
        lwd = G.log_weighted_densities_batch(
            inp.array.reshape(-1, c), self.gmm_params[layer_index])
        scores = np.max(lwd, axis=1).reshape(n, h * w)
        return scores if per_position else scores.mean(axis=1)

    # -- sampling ----------------------------------------------------------

    def sample(self, count: int, class_index: int | None = None, top_s: int = 1,
               seed: int = 0, use_pi_weights: bool = False,
               sharpen_iters: int = 0, sharpen_eps: float = 0.1,
               sharpen_layers=None) -> Tensor4:
        """Generate samples by walking the stack top-down.

        A control signal selects components per position: conditionally it is
        the inverted classifier output for the requested class, otherwise
        uniform over components (or the component weights when
        ``use_pi_weights`` is set).  At every GMM layer the selection is
        restricted to the ``top_s`` strongest control entries, a component is
        drawn, then a patch from its Gaussian; folding and pooling are
        inverted on the way down, optionally sharpening the signal at each
        GMM layer.
        """
        if count < 1:
            raise DomainError("sample count must be >= 1")
        if class_index is not None and self.linear is None:
            raise CapabilityError("conditional sampling needs a classifier layer")
        rng = np.random.default_rng(seed)
        top = self.top_gmm_index
        top_k = self.gmm_params[top].n_components
        if not 1 <= top_s <= top_k:
            raise DomainError(f"top_s must be in [1, {top_k}]")
        h, w, k = self.shapes[top + 1]
        if class_index is not None:
            onehot = np.zeros(self.n_classes)
            onehot[class_index] = 1.0
            control_vec = linear_invert(onehot, self.linear)
            control = np.broadcast_to(control_vec.reshape(1, h, w, k),
                                      (count, h, w, k)).copy()
        elif use_pi_weights:
            pi = G.component_weights(self.gmm_params[top].xi)
            control = np.broadcast_to(pi, (count, h, w, k)).copy()
        else:
            control = np.ones((count, h, w, k))
        signal = Tensor4(control)
        sharpen_set = set(self.gmm_layer_indices if sharpen_layers is None
                          else sharpen_layers)
        for i in range(top, -1, -1):
            spec = self.specs[i]
            if isinstance(spec, GmmLayerSpec):
                signal = self._draw_from_layer(i, signal, top_s, rng)
                if sharpen_iters > 0 and i in sharpen_set:
                    signal = self.sharpen(signal, i, sharpen_iters, sharpen_eps)
            elif isinstance(spec, FoldingSpec):
                th, tw, _ = self.shapes[i]
                signal = fold_backward(signal, spec, (th, tw))
            elif isinstance(spec, PoolingSpec):
                signal = unpool(signal, spec)
            else:
                raise CapabilityError("classifier layer cannot appear below a GMM layer")
        return signal

    def _draw_from_layer(self, layer_index: int, control: Tensor4, top_s: int,
                         rng: np.random.Generator) -> Tensor4:
        """Select components from the control signal and draw Gaussian patches."""
        params = self.gmm_params[layer_index]
        k = params.n_components
        n, h, w, ck = control.shape
        if ck != k:
            raise ShapeError(
                f"control signal has {ck} channels, layer {layer_index} has K={k}")
        s = min(top_s, k)
        ctrl = control.array.reshape(-1, k)
        m = ctrl.shape[0]
        if s == 1:
            chosen = np.argmax(ctrl, axis=1)
        else:
            part = np.argpartition(-ctrl, s - 1, axis=1)[:, :s]
            vals = np.take_along_axis(ctrl, part, axis=1)
            weights = np.maximum(vals, 0.0)
            sums = weights.sum(axis=1, keepdims=True)
            probs = np.where(sums > 0, weights / np.where(sums > 0, sums, 1.0),
                             1.0 / s)
            cum = np.cumsum(probs, axis=1)
            u = rng.random((m, 1))
            pos = np.minimum((u > cum).sum(axis=1), s - 1)
            chosen = part[np.arange(m), pos]
        noise = rng.standard_normal((m, params.dim))
        draws = params.mu[chosen] + noise / params.chol_d[chosen]
        return Tensor4(draws.reshape(n, h, w, params.dim))

    # -- sharpening ----------------------------------------------------------

    def sharpen(self, signal: Tensor4, layer_index: int, g_iters: int,
                eps_s: float) -> Tensor4:
        """Gradient-ascend the signal against a GMM layer's loss.

        Model parameters are untouched; only the signal moves.  Each position
        follows the gradient of its own smoothed max-component term.
        """
        if layer_index not in self.gmm_params:
            raise CapabilityError(f"layer {layer_index} is not a GMM layer")
        params = self.gmm_params[layer_index]
        expected = self.shapes[layer_index]
        if signal.shape[1:] != expected:
            raise ShapeError(
                f"signal shape {signal.shape[1:]} does not match layer "
                f"{layer_index} input {expected}")
        if g_iters == 0:
            return signal
        g = G.annealing_mask(params, self.annealing[layer_index])
        n, h, w, c = signal.shape
        x = signal.array.reshape(-1, c).copy()
        prec = params.chol_d ** 2
        pm = prec * params.mu
        for _ in range(g_iters):
            lwd = G.log_weighted_densities_batch(x, params)
            kstar = np.argmax(lwd @ g.T, axis=1)
            wts = g[kstar]
            x += eps_s * (wts @ pm - x * (wts @ prec))
        return Tensor4(x.reshape(n, h, w, c))


def build_model(specs, input_shape, *, eps: float = 0.01,
                eps_classifier: float | None = None, mu_range: float = 0.1,
                d_max: float = 20.0, sigma0: float | None = None,
                sigma_inf: float = 0.01, alpha: float | None = None,
                delta: float = 0.05, warmup_fraction: float = 0.5,
                annealing: bool = True, seed: int = 0) -> DcgmmModel:
    """Initialize a model for the given stack and (h, w, c) input shape.

    ``eps`` is the learning rate of every GMM layer (pass a dict keyed by
    layer index for per-layer rates); the classifier rate defaults to the
    same value.  ``annealing=False`` starts every sigma at its floor.
    """
    if isinstance(specs, str):
        specs = parse_architecture(specs)
    shapes = validate_architecture(specs, input_shape)
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    gmm_params: dict[int, G.GmmParams] = {}
    states: dict[int, G.AnnealingState] = {}
    stats: dict[int, LikelihoodStats] = {}
    linear = None
    eps_map: dict[int, float] = {}
    for i, spec in enumerate(specs):
        if isinstance(spec, GmmLayerSpec):
            h, w, c = shapes[i]
            layer_eps = eps[i] if isinstance(eps, dict) else eps
            gmm_params[i] = G.init_params(
                spec.k, c, mu_range, d_max,
                np.random.default_rng(seeds[i]), grid=spec.resolved_grid())
            st = G.default_annealing(spec.k, layer_eps, sigma0=sigma0,
                                     sigma_inf=sigma_inf, alpha=alpha, delta=delta)
            if not annealing:
                st.sigma = st.sigma_inf
            states[i] = st
            stats[i] = LikelihoodStats()
            eps_map[i] = layer_eps
        elif isinstance(spec, LinearLayerSpec):
            h, w, c = shapes[i]
            linear = init_linear(h * w * c, spec.n_classes)
    if eps_classifier is None:
        eps_classifier = eps if not isinstance(eps, dict) else 0.01
    return DcgmmModel(specs, input_shape, gmm_params, states, linear, stats,
                      eps_map, eps_classifier, warmup_fraction)
