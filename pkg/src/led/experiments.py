"""Experiment drivers behind the ``led`` command line."""

import csv
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .autodiff import Rng, Tensor, no_tape
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import CANONICAL_COUNTS, GaussianMixture, load_binarized_mnist
from .errors import ConfigError, LedError, NonFiniteLossError
from .figures import emit_latent_panels
from .nica import (
    DemoConfig,
    GridDensity,
    binned_mutual_information,
    chain_log_density_fn,
    grid_kl,
    fit_conditional_cdfs,
    gaussian_mixture_density,
    iaf_universality_demo,
    ks_uniform,
)
from .vae import (
    MetricsRow,
    TrainConfig,
    Trainer,
    aggregate_posterior_density,
    aggregate_posterior_samples,
    build_led_vae,
    fit_prior,
    nll_importance,
)

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
BEST_FILE = "best.ledf"


# ---------------------------------------------------------------------------
# datasets


def toy_mixture(cfg):
    t = cfg.toy
    if t.means:
        means = np.array(t.means).reshape(-1, 2)
        k = len(means)
        stds = np.array(t.stds) if t.stds else np.full(k, t.std)
        weights = np.array(t.weights) if t.weights else np.full(k, 1.0 / k)
        covs = np.stack([np.eye(2) * s**2 for s in stds])
        return GaussianMixture(means, covs, weights)
    mix = GaussianMixture.ring(t.components, t.radius, t.std)
    if t.weights:
        mix = GaussianMixture(mix.means, mix.covs, np.array(t.weights))
    return mix


def load_datasets(cfg, full=None):
    """``(train, valid, test)`` arrays for a toy or MNIST config."""
    kind = cfg.experiment.kind
    if kind == "toy":
        mix = toy_mixture(cfg)
        # data depend on the data seed only, so model seeds share one dataset
        gen = Rng(cfg.toy.data_seed).stream("toy-data")
        t = cfg.toy
        return (mix.sample(t.n_train, gen), mix.sample(t.n_valid, gen), mix.sample(t.n_test, gen))
    if kind == "mnist":
        if not cfg.data_dir:
            raise ConfigError("no MNIST directory: set [data] data_dir or LED_DATA_DIR")
        counts = CANONICAL_COUNTS if cfg.data.check_counts else None
        train, valid, test = load_binarized_mnist(cfg.data_dir, counts)
        full = cfg.data.full if full is None else full
        if not full:
            train = train[: cfg.data.train_subset]
            valid = valid[: cfg.data.valid_subset]
        return train, valid, test
    raise ConfigError(f"experiment kind {kind!r} has no VAE datasets")


def build_model(cfg, rng):
    m = cfg.model
    input_dim = 2 if cfg.experiment.kind == "toy" else 784
    return build_led_vae(
        input_dim, m.latent_dim, rng, likelihood=cfg.likelihood, enc_hidden=m.enc_hidden,
        dec_hidden=m.dec_hidden, l_prior=m.l_prior, prior_kind=m.prior_kind,
        prior_hidden=m.prior_hidden, l_post=m.l_post, post_kind=m.post_kind,
        post_hidden=m.post_hidden, mask_kind=m.mask_kind, activation=m.activation)


def train_config(cfg):
    t, e = cfg.training, cfg.evaluation
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, beta1=t.beta1,
                       beta2=t.beta2, k_importance=e.k_importance, eval_every=e.eval_every,
                       eval_batch=e.eval_batch)


# ---------------------------------------------------------------------------
# checkpoints


def trainer_checkpoint(trainer, cfg):
    tensors = {name: p.data for name, p in trainer.params.items()}
    tensors.update(trainer.optimizer.state_arrays())
    meta = {
        "epoch": trainer.epoch,
        "adam_step": trainer.optimizer.state.step,
        "rng": trainer.rng.get_state(),
        "config": cfg.to_text(),
        "trace": [[getattr(row, c) for c in MetricsRow.COLUMNS] for row in trainer.trace],
    }
    return Checkpoint(cfg.digest(), tensors, meta)


def restore_trainer(ckpt, cfg=None):
    """Rebuild model and trainer exactly as they were when ``ckpt`` was written."""
    if cfg is None:
        cfg = ExperimentConfig.from_text(ckpt.metadata["config"])
    if cfg.digest() != ckpt.digest:
        raise LedError("checkpoint was written under a different config (digest mismatch)")
    rng = Rng(cfg.training.seed)
    model = build_model(cfg, rng)
    trainer = Trainer(model, train_config(cfg), rng)
    missing = [name for name in trainer.params if name not in ckpt.tensors]
    if missing:
        raise LedError(f"checkpoint lacks parameters: {missing[:3]}")
    for name, p in trainer.params.items():
        if p.data.shape != ckpt.tensors[name].shape:
            raise LedError(f"parameter {name} has shape {ckpt.tensors[name].shape}, expected {p.data.shape}")
        p.data[...] = ckpt.tensors[name]
    trainer.optimizer.load_state_arrays(ckpt.tensors, ckpt.metadata["adam_step"])
    rng.set_state(ckpt.metadata["rng"])
    trainer.epoch = ckpt.metadata["epoch"]
    trainer.trace = [MetricsRow(*row) for row in ckpt.metadata["trace"]]
    return cfg, trainer


# ---------------------------------------------------------------------------
# output directory handling


@contextmanager
def locked_dir(path):
    """Exclusive ownership of an output directory through a lock file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LedError(f"{path} is in use by another experiment (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.COLUMNS)
        for row in rows:
            w.writerow([_fmt(getattr(row, c)) for c in MetricsRow.COLUMNS])


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in reader]


# ---------------------------------------------------------------------------
# drivers


def run_experiment(cfg, output_dir=None, full=None, resume=None, figures=True):
    """Train a toy or MNIST model per ``cfg`` and write its artifacts.

    Writes ``metrics.csv``, ``final.ledf`` (plus ``epoch_<n>.ledf`` at the
    configured cadence), ``summary.json`` and, for the 2-D toy, the latent-space panels.
    With ``select_best`` the lowest-validation-NLL state is kept in
    ``best.ledf`` and becomes the model that is evaluated and saved as final.
    """
    out = Path(output_dir or cfg.paths.output_dir)
    train, valid, test = load_datasets(cfg, full)
    if resume is not None:
        cfg, trainer = restore_trainer(load_checkpoint(resume, cfg.digest()), cfg)
    else:
        rng = Rng(cfg.training.seed)
        trainer = Trainer(build_model(cfg, rng), train_config(cfg), rng)
    every = cfg.training.checkpoint_every
    select_best, patience = cfg.training.select_best, cfg.training.patience
    best = {"epoch": 0, "val": float("inf")}
    for row in trainer.trace:
        if np.isfinite(row.val_nll_is) and row.val_nll_is < best["val"]:
            best = {"epoch": row.epoch, "val": row.val_nll_is}

    with locked_dir(out):
        def on_epoch(tr, row):
            write_metrics(out / METRICS_FILE, tr.trace)
            log.info("epoch %d elbo %.4f val_nll %.4f", row.epoch, row.elbo, row.val_nll_is)
            if every and tr.epoch % every == 0:
                save_checkpoint(out / f"epoch_{tr.epoch}.ledf", trainer_checkpoint(tr, cfg))
            if not np.isfinite(row.val_nll_is):
                return False
            if row.val_nll_is < best["val"]:
                best.update(epoch=row.epoch, val=row.val_nll_is)
                if select_best:
                    save_checkpoint(out / BEST_FILE, trainer_checkpoint(tr, cfg))
            # patience counts validation passes without improvement
            stale = (row.epoch - best["epoch"]) // cfg.evaluation.eval_every
            return bool(patience) and stale >= patience

        try:
            trainer.fit(train, valid, on_epoch=on_epoch)
        except NonFiniteLossError as exc:
            for name, arr in (exc.last_finite_state or {}).items():
                trainer.params[name].data[...] = arr
            save_checkpoint(out / "last_finite.ledf", trainer_checkpoint(trainer, cfg))
            raise
        write_metrics(out / METRICS_FILE, trainer.trace)
        epochs_run = trainer.epoch
        if select_best and best["epoch"]:
            cfg, trainer = restore_trainer(load_checkpoint(out / BEST_FILE, cfg.digest()), cfg)
        prior_trace = run_prior_phase(cfg, trainer, train, out)
        save_checkpoint(out / "final.ledf", trainer_checkpoint(trainer, cfg))
        summary = {
            "epochs": epochs_run,
            "selected_epoch": trainer.epoch,
            "val_nll_is": trainer.evaluate(valid),
            "test_nll_is": evaluate_nll(trainer, test),
            "k_importance": cfg.evaluation.k_importance,
            "config_digest": cfg.digest(),
        }
        if prior_trace:
            summary["prior_only"] = prior_trace
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        if figures and cfg.experiment.kind == "toy" and cfg.model.latent_dim == 2:
            emit_latent_panels(trainer.model, train, out / "figures", Rng(cfg.training.seed).fresh("figures"))
    return summary


def prior_kl_monitor(model, train, box=((-5.0, 5.0), (-5.0, 5.0)), resolution=200):
    """``step -> KL(aggregate posterior || prior)`` on a grid, for 2-D latents."""
    qbar = GridDensity.from_function(aggregate_posterior_density(model, train), box, resolution)
    log_p = chain_log_density_fn(model.prior)
    return lambda step: {"step": step, "grid_kl": grid_kl(qbar, log_p)}


def run_prior_phase(cfg, trainer, train, out):
    """Optional prior-only updates after joint training; writes ``prior_only.csv``."""
    t = cfg.training
    model = trainer.model
    if not t.prior_only_steps or not model.prior.parameters():
        return []
    if model.latent_dim == 2 and not model.posterior_flow.layers:
        monitor = prior_kl_monitor(model, train)
    else:
        probe = aggregate_posterior_samples(model, train, 2000, trainer.rng.fresh("prior-probe"))
        log_p = chain_log_density_fn(model.prior)

        def monitor(step):
            return {"step": step, "aggregate_log_prior": float(log_p(probe).mean())}

    trace = fit_prior(model, train, t.prior_only_steps, t.prior_only_batch, t.prior_only_lr,
                      trainer.rng.stream("prior-only"), t.prior_only_every, monitor)
    with open(out / "prior_only.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(trace[0]))
        w.writeheader()
        for r in trace:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return trace


def evaluate_nll(trainer, X, K=None):
    K = trainer.config.k_importance if K is None else K
    return nll_importance(trainer.model, X, K, trainer.rng.fresh("test"), trainer.config.eval_batch)


def evaluate_checkpoint(path, K=None, split="valid", data_dir=None):
    """NLL of a checkpointed model on one split, using the training-time eval stream."""
    cfg, trainer = restore_trainer(load_checkpoint(path))
    data_cfg = cfg.override(**{"data.data_dir": data_dir}) if data_dir else cfg
    train, valid, test = load_datasets(data_cfg)
    X = {"train": train, "valid": valid, "test": test}[split]
    if split == "test":
        return evaluate_nll(trainer, X, K)
    return trainer.evaluate(X, K)


def sample_checkpoint(path, n, gen, latent=False):
    """``n`` samples of ``x`` (or ``z`` with ``latent=True``) from a trained model."""
    _, trainer = restore_trainer(load_checkpoint(path))
    model = trainer.model
    z = model.prior.sample(n, gen)
    if latent:
        return z
    mean = model.decoder.mean(z)
    if hasattr(model.decoder, "logits"):
        return (gen.random(mean.shape) < mean).astype(np.float64)
    return mean + np.exp(0.5 * model.decoder.logvar.data) * gen.standard_normal(mean.shape)


def parse_axis(spec):
    """``"l_prior=0,4,8"`` -> ``("model.l_prior", ["0", "4", "8"])``."""
    name, eq, values = spec.partition("=")
    if not eq or not values:
        raise ConfigError(f"axis must look like name=v1,v2,..., got {spec!r}")
    name = name.strip()
    if "." not in name:
        owners = [s for s in ("model", "training", "evaluation", "data", "toy") if name in _schema_keys(s)]
        if len(owners) != 1:
            raise ConfigError(f"cannot place sweep axis {name!r} in a config section")
        name = f"{owners[0]}.{name}"
    return name, [v.strip() for v in values.split(",") if v.strip()]


def _schema_keys(section):
    from .config import SCHEMA

    return SCHEMA[section]


def run_sweep(cfg, axis, output_dir=None, full=None):
    """One experiment per axis value, each in ``<output>/<key>=<value>/``."""
    name, values = parse_axis(axis)
    key = name.split(".")[1]
    root = Path(output_dir or cfg.paths.output_dir)
    rows = []
    for v in values:
        cell = cfg.override(**{name: v})
        summary = run_experiment(cell, root / f"{key}={v}", full=full)
        rows.append({key: v, "val_nll_is": summary["val_nll_is"], "test_nll_is": summary["test_nll_is"]})
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[key, "val_nll_is", "test_nll_is"])
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# conditional-CDF / universality demo


def nica_targets(cfg):
    n = cfg.nica
    box = [tuple(n.box)] * 2
    rho = 0.8
    cov = np.array([[1.0, rho], [rho, 1.0]])
    from scipy import stats

    corr = stats.multivariate_normal([0, 0], cov)
    a, b = stats.norm(0, 1), stats.t(df=5)
    means = np.array(n.means).reshape(-1, 2)
    mix = gaussian_mixture_density(means, [np.eye(2) * n.std**2] * len(means),
                                   [1.0 / len(means)] * len(means))
    res = n.resolution
    return {
        "product": GridDensity.from_function(lambda p: a.pdf(p[:, 0]) * b.pdf(p[:, 1]), box, res),
        "correlated_gaussian": GridDensity.from_function(corr.pdf, box, res),
        "mixture": GridDensity.from_function(mix, box, res),
    }


def run_nica_demo(cfg, output_dir=None, n_check=10000):
    """Conditional-CDF independence checks plus the IAF depth comparison."""
    out = Path(output_dir or cfg.paths.output_dir)
    n = cfg.nica
    targets = nica_targets(cfg)
    gen = Rng(cfg.training.seed).stream("nica-check")
    checks = {}
    for name, target in targets.items():
        t = fit_conditional_cdfs(target)
        y = t.transform(target.sample(n_check, gen))
        checks[name] = {
            "ks": ks_uniform(y).tolist(),
            "ks_critical": 1.63 / np.sqrt(n_check),
            "pearson": float(np.corrcoef(y.T)[0, 1]),
            "mutual_information": binned_mutual_information(y),
        }
    demo_cfg = DemoConfig(hidden_sizes=n.hidden, n_samples=n.n_samples, epochs=n.epochs,
                          batch_size=n.batch_size, lr=n.lr)
    rows = []
    with locked_dir(out):
        for layers in n.layers:
            for seed in n.seeds:
                _, trace = iaf_universality_demo(targets["mixture"], layers, demo_cfg, Rng(seed))
                rows.extend({"layers": layers, "seed": seed, "epoch": e, "grid_kl": kl}
                            for e, kl in enumerate(trace))
                log.info("layers %d seed %d final KL %.4f", layers, seed, trace[-1])
        with open(out / "nica_metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["layers", "seed", "epoch", "grid_kl"])
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        final = {}
        for layers in n.layers:
            finals = [r["grid_kl"] for r in rows if r["layers"] == layers and r["epoch"] == n.epochs]
            final[str(layers)] = {"per_seed": finals, "mean": float(np.mean(finals))}
        summary = {"cdf_checks": checks, "final_grid_kl": final}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def latent_density_fn(path, which):
    """Density callable for ``led density-map`` from a checkpoint."""
    _, trainer = restore_trainer(load_checkpoint(path))
    model = trainer.model
    if which == "base":
        chain = model.prior.base
        fn = lambda p: np.exp(chain.log_prob(Tensor(p)).data)  # noqa: E731
    elif which == "prior":
        def fn(p):
            with no_tape():
                return np.exp(model.prior.log_density(Tensor(p)).data)
    elif which == "marginal":
        from .figures import marginal_density_fn

        fn = marginal_density_fn(model, Rng(trainer.rng.seed).fresh("figures"))
    else:
        raise ConfigError(f"unknown density {which!r}")
    return fn
