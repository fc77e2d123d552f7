"""Sequential, rehearsal-free training of per-task prompt generators.

:class:`ContinualPromptTuner` follows the estimator conventions of
scikit-learn: hyper-parameters are constructor arguments, learned state lives
in attributes with a trailing underscore, ``partial_fit`` consumes one task,
``fit`` consumes a whole stream and ``predict`` / ``score`` run label-free
inference.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .checkpoint import load_arrays, save_arrays
from .backbone import BackboneParams, FrozenBackbone, MultimodalSequence, exact_match
from .exceptions import ConfigurationError, SequencingError
from .generator import MODES, PromptGenerator
from .nullspace import MomentStats, ProjectionMatrix, compute_projection, update_moment
from .optim import CosineSchedule, right_projection_hook, sgd_step
from .projector import SharedProjector
from .router import ROUTER_MODES, PrototypeRouter, RouterEncoders, routing_feature
from .stream import Batch, StreamConfig, Task, TaskStream, stack_samples
from .validation import check_batch

log = logging.getLogger(__name__)


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("DRAPE_THREADS", "1")))
    except ValueError:
        return 1


class ContinualPromptTuner(BaseEstimator):
    """Continual instruction tuning with instance-specific soft prompts.

    Per task a fresh prompt generator is trained together with the shared
    visual projector. From the second task on, projector weight gradients are
    projected onto the complement of the feature subspace seen so far. After
    each task the generator is frozen and a routing prototype is registered.

    Parameters
    ----------
    prompt_len, hidden, n_heads, dropout : generator shape and regularisation.
    generator_mode : {"segment", "mean", "static", "learnable"}
    cross_attention : bool
        False drops the vision-guided attention stage (ablation).
    nullspace : bool
        False disables gradient projection on the projector (ablation).
    eps : float
        Energy-retention threshold in (0, 1].
    project_bias : bool
        Also project projector biases, using statistics of ``[x; 1]``.
    lr_generator, lr_projector : float
        Peak learning rates of the two parameter groups.
    epochs, batch_size, warmup_ratio : schedule.
    max_grad_norm : float or None
        Global gradient-norm clip applied after projection.
    router_mode : {"learned", "oracle", "none"}
        Generator selection used by ``predict``.
    tau, proto_lr, proto_steps : prototype refinement settings.
    model_dim, vis_dim, decoder_heads, router_dim : frozen backbone sizes.
    seed : int
    """

    def __init__(
        self,
        prompt_len: int = 4,
        hidden: int = 32,
        n_heads: int = 4,
        dropout: float = 0.1,
        generator_mode: str = "segment",
        cross_attention: bool = True,
        nullspace: bool = True,
        eps: float = 0.99,
        project_bias: bool = False,
        lr_generator: float = 0.5,
        lr_projector: float = 0.05,
        epochs: int = 10,
        batch_size: int = 8,
        warmup_ratio: float = 0.03,
        max_grad_norm: float | None = 1.0,
        router_mode: str = "learned",
        tau: float = 0.07,
        proto_lr: float = 0.05,
        proto_steps: int = 100,
        model_dim: int = 32,
        vis_dim: int | None = None,
        decoder_heads: int = 4,
        router_dim: int = 16,
        seed: int = 0,
    ):
        self.prompt_len = prompt_len
        self.hidden = hidden
        self.n_heads = n_heads
        self.dropout = dropout
        self.generator_mode = generator_mode
        self.cross_attention = cross_attention
        self.nullspace = nullspace
        self.eps = eps
        self.project_bias = project_bias
        self.lr_generator = lr_generator
        self.lr_projector = lr_projector
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_ratio = warmup_ratio
        self.max_grad_norm = max_grad_norm
        self.router_mode = router_mode
        self.tau = tau
        self.proto_lr = proto_lr
        self.proto_steps = proto_steps
        self.model_dim = model_dim
        self.vis_dim = vis_dim
        self.decoder_heads = decoder_heads
        self.router_dim = router_dim
        self.seed = seed

    # ------------------------------------------------------------ setup

    def _validate_params(self):
        if self.generator_mode not in MODES:
            raise ConfigurationError(f"generator_mode must be one of {MODES}")
        if self.router_mode not in ROUTER_MODES:
            raise ConfigurationError(f"router_mode must be one of {ROUTER_MODES}")
        if not 0.0 < self.eps <= 1.0:
            raise ConfigurationError("eps must lie in (0, 1]")
        if self.lr_generator <= 0 or self.lr_projector <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")

    def _setup(self, cfg: StreamConfig):
        self._validate_params()
        vis_dim = self.vis_dim or cfg.d_v
        self.stream_config_ = cfg
        self.backbone_ = FrozenBackbone.create(
            cfg.vocab, cfg.s_max, cfg.d_v, vis_dim, self.model_dim, self.decoder_heads, cfg.answer_len, self.seed
        )
        self.projector_ = SharedProjector(vis_dim, self.model_dim, seed=self.seed)
        self.encoders_ = RouterEncoders.create(cfg.vocab, cfg.d_v, self.router_dim, self.seed)
        self.router_ = PrototypeRouter(tau=self.tau, lr=self.proto_lr, steps=self.proto_steps)
        self.generators_: list[PromptGenerator] = []
        extra = 1 if self.project_bias else 0
        self.moments_ = {
            "layer1": MomentStats.zeros(vis_dim + extra),
            "layer2": MomentStats.zeros(self.projector_.d_hidden + extra),
        }
        self.projections_: dict[str, ProjectionMatrix] | None = None
        self.n_tasks_seen_ = 0
        self.loss_history_: list[tuple[int, int, float, float]] = []
        self.spectra_: list[dict] = []

    def new_generator(self, task_id: int) -> PromptGenerator:
        return PromptGenerator(
            d=self.model_dim,
            hidden=self.hidden,
            prompt_len=self.prompt_len,
            n_heads=self.n_heads,
            dropout=self.dropout,
            mode=self.generator_mode,
            cross_attention=self.cross_attention,
            seed=int(np.random.SeedSequence([self.seed, task_id]).generate_state(1)[0]),
            prefix=f"generator.{task_id}",
        )

    # ------------------------------------------------------------ forward pieces

    def _inputs(self, batch: Batch, collect: bool = False):
        feats = self.backbone_.encode_image(batch.visual)
        w = self.projector_(feats, collect=collect)
        u = self.backbone_.embed_text(batch.tokens, batch.mask)
        return w, u

    def batch_loss(self, gen: PromptGenerator, batch: Batch, train_mode: bool = False, collect: bool = False):
        w, u = self._inputs(batch, collect)
        prompt = gen(w, u, batch.mask, train_mode=train_mode)
        return self.backbone_.nll_loss(MultimodalSequence(prompt, w, u, batch.mask), batch.answer)

    def _hooks(self) -> dict:
        if not self.nullspace or self.projections_ is None:
            return {}
        hooks = {}
        for layer in self.projector_.layer_names:
            proj = self.projections_[layer].proj
            wname = self.projector_.weight(layer).name
            if self.project_bias:
                hooks[(wname, self.projector_.bias(layer).name)] = proj
            else:
                hooks[wname] = right_projection_hook(proj)
        return hooks

    def _apply_joint_hooks(self, grads: dict, hooks: dict):
        # bias projection: treat [W, b] as one matrix acting on [x; 1]
        for key in [k for k in hooks if isinstance(k, tuple)]:
            wname, bname = key
            joint = np.concatenate([grads[wname], grads[bname][:, None]], axis=1) @ hooks.pop(key)
            grads[wname], grads[bname] = joint[:, :-1], joint[:, -1]

    # ------------------------------------------------------------ training

    def partial_fit(self, task: Task, y=None):
        """Train on one task (the next one in the stream)."""
        if not hasattr(self, "backbone_"):
            self._setup(task.config)
        if task.id != self.n_tasks_seen_:
            raise SequencingError(f"expected task {self.n_tasks_seen_}, got task {task.id}")
        if task.config != self.stream_config_:
            raise ConfigurationError("task comes from a differently configured stream")
        t = task.id
        gen = self.new_generator(t)
        self.generators_.append(gen)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, t, 0x5A]))
        n = len(task.train)
        steps_per_epoch = -(-n // self.batch_size)
        total = steps_per_epoch * self.epochs
        sched_g = CosineSchedule(self.lr_generator, total, self.warmup_ratio)
        sched_p = CosineSchedule(self.lr_projector, total, self.warmup_ratio)
        hooks = self._hooks() if t > 0 else {}
        params = {p.name: p for p in [*gen.params, *self.projector_.params]}
        cache = []
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = stack_samples([task.train[i] for i in order[start : start + self.batch_size]])
                if epoch == 0:
                    cache.append(routing_feature(self.encoders_, batch.tokens, batch.mask, batch.visual))
                loss = self.batch_loss(gen, batch, train_mode=True, collect=True)
                grads = ag.backward(loss)
                step_hooks = dict(hooks)
                self._apply_joint_hooks(grads, step_hooks)
                lr_g, lr_p = sched_g(step), sched_p(step)
                lrs = {name: (lr_p if name.startswith("projector.") else lr_g) for name in grads}
                sgd_step(params, grads, lrs, step_hooks, self.max_grad_norm)
                self.loss_history_.append((t, step, float(loss.data), lr_g))
                step += 1

        # post-task steps: freeze, moments + projection, prototype
        gen.freeze()
        drained = self.projector_.drain_taps(augmented=self.project_bias)
        projections = {}
        for layer, (gram, count) in drained.items():
            self.moments_[layer] = update_moment(self.moments_[layer], gram, count)
            projections[layer] = compute_projection(self.moments_[layer].M, self.eps)
            self.spectra_.append(
                {"task": t, "layer": layer, "rank": projections[layer].rank, "spectrum": projections[layer].spectrum}
            )
        self.projections_ = projections
        self.router_.partial_fit(np.vstack(cache), discard=True)
        self.n_tasks_seen_ += 1
        log.info("task %d done: final loss %.4f", t + 1, self.loss_history_[-1][2])
        return self

    def fit(self, stream: TaskStream, y=None, evaluate: bool = True, callback=None):
        """Train on every task in order; with ``evaluate`` fill the accuracy matrix.

        ``callback(self, task)`` runs after each task (and its evaluation).
        """
        self._setup(stream.config)
        T = len(stream)
        self.accuracy_ = np.full((T, T), np.nan)
        self.routing_log_: list[tuple[int, int]] = []
        for task in stream:
            self.partial_fit(task)
            if evaluate:
                t = task.id
                self.accuracy_[: t + 1, t] = self.evaluate_stream(stream, t + 1)
            if callback is not None:
                callback(self, task)
        return self

    # ------------------------------------------------------------ inference

    def route(self, batch: Batch, mode: str | None = None) -> np.ndarray:
        check_is_fitted(self, "backbone_")
        if self.n_tasks_seen_ == 0:
            raise SequencingError("no task has been trained")
        mode = self.router_mode if mode is None else mode
        if mode == "learned":
            return self.router_.predict(routing_feature(self.encoders_, batch.tokens, batch.mask, batch.visual))
        if mode == "oracle":
            return np.minimum(np.asarray(batch.task_ids), self.n_tasks_seen_ - 1)
        if mode == "none":
            return np.full(len(batch), self.n_tasks_seen_ - 1)
        raise ConfigurationError(f"unknown router mode {mode!r}")

    def infer(self, batch: Batch, mode: str | None = None, return_attention: bool = False):
        """Label-free inference. Returns ``(tokens, routed_task_ids[, attention])``."""
        batch = check_batch(batch)
        routed = self.route(batch, mode)
        pred = np.zeros_like(batch.answer)
        attention = [None] * len(batch)
        with ag.no_grad():
            w, u = self._inputs(batch)
            for g in np.unique(routed):
                idx = np.flatnonzero(routed == g)
                wg, ug, mg = ag.Tensor(w.data[idx]), u[idx], batch.mask[idx]
                prompt, att = self.generators_[g].generate_with_attention(wg, ug, mg, train_mode=False)
                seq = MultimodalSequence(prompt, wg, ug, mg)
                pred[idx] = self.backbone_.greedy_decode(seq, batch.answer.shape[1])
                if att is not None:
                    for k, i in enumerate(idx):
                        attention[i] = att[k]
        if return_attention:
            return pred, routed, attention
        return pred, routed

    def predict(self, X: Batch) -> np.ndarray:
        return self.infer(X)[0]

    def score(self, X: Batch, y=None, mode: str | None = None) -> float:
        """Exact-match accuracy in [0, 1]."""
        gold = X.answer if y is None else np.asarray(y)
        pred, _ = self.infer(X, mode)
        return float(exact_match(pred, gold).mean())

    def evaluate_stream(self, stream: TaskStream, upto: int, mode: str | None = None, log_routing: bool = True):
        """Accuracies (percent) on the test splits of tasks ``0..upto-1``."""
        if upto > self.n_tasks_seen_:
            raise SequencingError(f"only {self.n_tasks_seen_} tasks trained, asked for {upto}")
        tests = [stack_samples(stream[s].test) for s in range(upto)]
        threads = eval_threads()
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(lambda b: self.infer(b, mode), tests))
        else:
            results = [self.infer(b, mode) for b in tests]
        row = np.array([100.0 * exact_match(pred, b.answer).mean() for (pred, _), b in zip(results, tests)])
        if log_routing and hasattr(self, "routing_log_"):
            self.routing_log_ = [
                (int(s), int(r)) for b, (_, routed) in zip(tests, results) for s, r in zip(b.task_ids, routed)
            ]
        return row

    def routing_log(self, stream: TaskStream, upto: int | None = None) -> list[tuple[int, int]]:
        """(true task, routed task) for every test sample of the first ``upto`` tasks."""
        upto = self.n_tasks_seen_ if upto is None else upto
        out = []
        for s in range(upto):
            b = stack_samples(stream[s].test)
            out += [(s, int(r)) for r in self.route(b, "learned")]
        return out

    # ------------------------------------------------------------ persistence

    def get_state(self) -> tuple[dict[str, np.ndarray], dict]:
        """Every learned array plus the metadata needed to rebuild the estimator."""
        check_is_fitted(self, "backbone_")
        arrays = {f"backbone.{k}": v for k, v in self.backbone_.params.arrays().items()}
        arrays.update(self.projector_.params.state())
        for gen in self.generators_:
            arrays.update({k: np.array(v) for k, v in gen.state().items()})
        arrays["router.token_table"] = self.encoders_.token_table
        arrays["router.image_map"] = self.encoders_.image_map
        if hasattr(self.router_, "prototypes_"):
            arrays["router.prototypes"] = self.router_.prototypes_
        for layer, stats in self.moments_.items():
            arrays[f"moments.{layer}.M"] = stats.M
            arrays[f"moments.{layer}.N"] = np.array(stats.N, dtype=np.int64)
        for layer, p in (self.projections_ or {}).items():
            for field in ("proj", "v_perp", "v_par", "spectrum"):
                arrays[f"projection.{layer}.{field}"] = getattr(p, field)
            arrays[f"projection.{layer}.rank"] = np.array(p.rank, dtype=np.int64)
        meta = {
            "estimator": self.get_params(),
            "stream": self.stream_config_.to_dict(),
            "n_tasks_seen": self.n_tasks_seen_,
            "decoder_heads": self.backbone_.params.n_heads,
        }
        return arrays, meta

    def set_state(self, arrays: dict[str, np.ndarray], meta: dict):
        """Restore an estimator saved by :meth:`get_state`."""
        self.set_params(**meta["estimator"])
        self._setup(StreamConfig(**meta["stream"]))
        bb = {k[len("backbone.") :]: v for k, v in arrays.items() if k.startswith("backbone.")}
        for v in bb.values():
            v.setflags(write=False)
        self.backbone_ = FrozenBackbone(BackboneParams(n_heads=int(meta["decoder_heads"]), **bb))
        for name in self.projector_.params.names():
            self.projector_.params[name].data = arrays[name]
        for t in range(int(meta["n_tasks_seen"])):
            gen = self.new_generator(t)
            gen.load_state(arrays)
            gen.freeze()
            self.generators_.append(gen)
        self.encoders_ = RouterEncoders(arrays["router.token_table"], arrays["router.image_map"])
        if "router.prototypes" in arrays:
            self.router_.prototypes_ = arrays["router.prototypes"]
            self.router_.classes_ = np.arange(len(arrays["router.prototypes"]))
            self.router_.n_features_in_ = arrays["router.prototypes"].shape[1]
        for layer in self.moments_:
            self.moments_[layer] = MomentStats(arrays[f"moments.{layer}.M"], int(arrays[f"moments.{layer}.N"]))
        if "projection.layer1.proj" in arrays:
            self.projections_ = {
                layer: ProjectionMatrix(
                    arrays[f"projection.{layer}.proj"],
                    int(arrays[f"projection.{layer}.rank"]),
                    arrays[f"projection.{layer}.v_perp"],
                    arrays[f"projection.{layer}.v_par"],
                    arrays[f"projection.{layer}.spectrum"],
                )
                for layer in self.moments_
            }
        self.n_tasks_seen_ = int(meta["n_tasks_seen"])
        return self

    def save(self, directory) -> str:
        """Write a checkpoint; returns the manifest hash."""
        arrays, meta = self.get_state()
        return save_arrays(directory, arrays, meta)

    @classmethod
    def load(cls, directory) -> "ContinualPromptTuner":
        arrays, meta = load_arrays(directory)
        return cls().set_state(arrays, meta)
