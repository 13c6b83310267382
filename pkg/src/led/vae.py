"""VAE with learnable flow prior ``h`` and flow posterior ``g``.

The encoder gives a diagonal Gaussian ``q(z'|x)``, the posterior flow maps
``z = g(z')`` and the prior density is ``p(z) = p_base(h^-1(z)) |d h^-1/dz|``.
The training objective is the single-sample estimate of::

    E[log p(x|g(z'))]
      + E[log p_base(h^-1(g(z'))) + log |d h^-1/dz (g(z'))|]
      - E[log q(z'|x) - log |d g/dz' (z')|]

which reduces to the ordinary ELBO when both flows are empty.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .autodiff import Adam, Tape, Tensor, as_tensor, backward, clip, no_tape
from .errors import ContractError, NonFiniteLossError
from .flows import LOG_2PI, BaseDensity, FlowChain, build_coupling_chain
from .made import build_iaf_chain
from .nn import MLP, Linear, Module

LOGVAR_CLAMP = 10.0


# ---------------------------------------------------------------------------
# encoders / decoders


class GaussianEncoder(Module):
    """MLP producing the mean and clamped log-variance of ``q(z'|x)``."""

    def __init__(self, input_dim, hidden_sizes, latent_dim, gen, activation="relu"):
        self.net = MLP([input_dim, *hidden_sizes, 2 * latent_dim], gen, activation)
        self.latent_dim = latent_dim
        last = self.net.layers[-1]
        last.weight.data *= 0.1

    def __call__(self, x):
        out = self.net(as_tensor(x))
        d = self.latent_dim
        return out[:, :d], clip(out[:, d:], -LOGVAR_CLAMP, LOGVAR_CLAMP)


class LinearGaussianEncoder(Module):
    """``mu = x @ A + c`` with an input-independent log-variance."""

    def __init__(self, A, c, logvar, trainable=True):
        self.A = Tensor(np.array(A, dtype=np.float64), requires_grad=trainable)
        self.c = Tensor(np.array(c, dtype=np.float64), requires_grad=trainable)
        self.logvar = Tensor(np.array(logvar, dtype=np.float64), requires_grad=trainable)
        self.latent_dim = self.A.shape[1]

    def __call__(self, x):
        x = as_tensor(x)
        mu = x @ self.A + self.c
        return mu, clip(self.logvar * Tensor(np.ones((x.shape[0], 1))), -LOGVAR_CLAMP, LOGVAR_CLAMP)


class BernoulliDecoder(Module):
    """Factorised Bernoulli likelihood over binary pixels, parameterised by logits."""

    def __init__(self, latent_dim, hidden_sizes, output_dim, gen, activation="relu"):
        self.net = MLP([latent_dim, *hidden_sizes, output_dim], gen, activation)

    def logits(self, z):
        return self.net(as_tensor(z))

    def log_likelihood(self, x, z):
        # x*l - softplus(l) == x log sigmoid(l) + (1-x) log sigmoid(-l)
        l = self.logits(z)
        return (as_tensor(x) * l - l.softplus()).sum(axis=1)

    def mean(self, z):
        with no_tape():
            return self.logits(z).sigmoid().data


class GaussianDecoder(Module):
    """Gaussian likelihood with an MLP mean and a learned diagonal log-variance."""

    def __init__(self, latent_dim, hidden_sizes, output_dim, gen, activation="relu",
                 learn_variance=True):
        self.net = MLP([latent_dim, *hidden_sizes, output_dim], gen, activation)
        self.logvar = Tensor(np.zeros(output_dim), requires_grad=learn_variance)

    def log_likelihood(self, x, z):
        m = self.net(as_tensor(z))
        lv = self.logvar
        r = as_tensor(x) - m
        return (r.square() * (-lv).exp() + lv + LOG_2PI).sum(axis=1) * -0.5

    def mean(self, z):
        with no_tape():
            return self.net(as_tensor(z)).data


class LinearGaussianDecoder(Module):
    """``p(x|z) = N(z W^T + b, noise_var I)``; the closed-form oracle's likelihood."""

    def __init__(self, W, b, noise_var, trainable=False):
        self.Wt = Tensor(np.array(W, dtype=np.float64).T.copy(), requires_grad=trainable)
        self.b = Tensor(np.array(b, dtype=np.float64), requires_grad=trainable)
        self.logvar = Tensor(np.full(len(b), np.log(noise_var)), requires_grad=trainable)

    def log_likelihood(self, x, z):
        r = as_tensor(x) - (as_tensor(z) @ self.Wt + self.b)
        lv = self.logvar
        return (r.square() * (-lv).exp() + lv + LOG_2PI).sum(axis=1) * -0.5

    def mean(self, z):
        with no_tape():
            return (as_tensor(z) @ self.Wt + self.b).data


class LedVae(Module):
    """Encoder, posterior flow ``g``, prior flow ``h`` and decoder."""

    def __init__(self, encoder, decoder, prior, posterior_flow=None):
        self.encoder = encoder
        self.decoder = decoder
        self.prior = prior
        self.latent_dim = prior.dim
        if posterior_flow is None:
            posterior_flow = FlowChain(BaseDensity(self.latent_dim), [])
        self.posterior_flow = posterior_flow

    def group_parameters(self):
        """Parameters split into decoder (theta), encoder+posterior flow (phi), prior (pi)."""
        theta = dict(self.decoder.named_parameters("decoder."))
        phi = dict(self.encoder.named_parameters("encoder."))
        phi.update(self.posterior_flow.named_parameters("posterior_flow."))
        pi = dict(self.prior.named_parameters("prior."))
        return {"theta": theta, "phi": phi, "pi": pi}


def build_led_vae(input_dim, latent_dim, rng, likelihood="bernoulli", enc_hidden=(200, 200),
                  dec_hidden=(200, 200), l_prior=0, prior_kind="nvp", prior_hidden=(100,),
                  l_post=0, post_kind="made", post_hidden=(512, 512), mask_kind="random_half",
                  activation="relu"):
    """Assemble an :class:`LedVae` drawing weights from ``rng``'s init stream."""
    gen = rng.stream("init")
    mask_gen = rng.stream("mask-choice")
    encoder = GaussianEncoder(input_dim, list(enc_hidden), latent_dim, gen, activation)
    if likelihood == "bernoulli":
        decoder = BernoulliDecoder(latent_dim, list(dec_hidden), input_dim, gen, activation)
    elif likelihood == "gaussian":
        decoder = GaussianDecoder(latent_dim, list(dec_hidden), input_dim, gen, activation)
    else:
        raise ContractError(f"unknown likelihood {likelihood!r}")
    prior = _build_flow(prior_kind, latent_dim, l_prior, gen, mask_gen, prior_hidden, mask_kind,
                        activation)
    post = _build_flow(post_kind, latent_dim, l_post, gen, mask_gen, post_hidden, mask_kind,
                       activation)
    return LedVae(encoder, decoder, prior, post)


def _build_flow(kind, dim, n_layers, gen, mask_gen, hidden, mask_kind, activation):
    if kind == "nvp":
        return build_coupling_chain(dim, n_layers, gen, mask_gen, tuple(hidden), mask_kind,
                                    activation=activation)
    if kind == "made":
        return build_iaf_chain(dim, n_layers, gen, mask_gen, tuple(hidden), activation=activation)
    raise ContractError(f"unknown flow kind {kind!r}")


# ---------------------------------------------------------------------------
# objectives


@dataclass
class ObjectiveTerms:
    """Batch-mean objective terms (nats); ``elbo`` is their sum."""

    reconstruction: Tensor
    prior_term: Tensor
    entropy_term: Tensor
    elbo: Tensor

    @classmethod
    def from_terms(cls, reconstruction, prior_term, entropy_term):
        elbo = reconstruction + prior_term + entropy_term
        return cls(reconstruction, prior_term, entropy_term, elbo)

    def as_floats(self):
        return {
            "elbo": self.elbo.item(),
            "reconstruction": self.reconstruction.item(),
            "prior_term": self.prior_term.item(),
            "entropy_term": self.entropy_term.item(),
        }


def _diag_gaussian_log_density(eps, logvar):
    return (eps.square() + logvar + LOG_2PI).sum(axis=1) * -0.5


def encode_and_sample(model, x, gen):
    """Reparameterised draw ``z' = mu + sigma * eps`` and ``log q(z'|x)``."""
    mu, logvar = model.encoder(x)
    eps = Tensor(gen.standard_normal(mu.shape))
    zp = mu + (logvar * 0.5).exp() * eps
    return zp, _diag_gaussian_log_density(eps, logvar)


def elbo_plain(model, x, gen):
    """Ordinary single-sample ELBO with the base density as prior; flows ignored."""
    zp, log_q = encode_and_sample(model, x, gen)
    recon = model.decoder.log_likelihood(x, zp)
    prior = model.prior.base.log_prob(zp)
    return ObjectiveTerms.from_terms(recon.mean(), prior.mean(), (-log_q).mean())


def _posterior_push(model, zp, log_q):
    """Apply ``g``; returns ``z`` and the per-point ``-log q + log|dg/dz'|``."""
    if not model.posterior_flow.layers:
        return zp, -log_q
    z, log_det = model.posterior_flow.forward(zp)
    return z, -log_q + log_det


def elbo_led(model, x, gen):
    """Single-sample estimate of the flow-prior / flow-posterior objective."""
    zp, log_q = encode_and_sample(model, x, gen)
    z, entropy = _posterior_push(model, zp, log_q)
    recon = model.decoder.log_likelihood(x, z)
    prior = model.prior.log_density(z)
    return ObjectiveTerms.from_terms(recon.mean(), prior.mean(), entropy.mean())


def log_importance_weights(model, x, K, gen, max_rows=20000):
    """[K, batch] array of ``log p(x|z_k) + log p(z_k) - log q(z_k|x)``.

    Draws are taken K-major from ``gen``, so for ``K == 1`` they coincide with
    the draw :func:`elbo_led` would make from the same generator state.
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    out = np.empty((K, B))
    with no_tape():
        mu, logvar = model.encoder(x)
        std = (logvar * 0.5).exp().data
        chunk = max(1, max_rows // B)
        for start in range(0, K, chunk):
            kc = min(chunk, K - start)
            eps = gen.standard_normal((kc, B, model.latent_dim))
            zp = Tensor((mu.data[None] + std[None] * eps).reshape(kc * B, -1))
            lv = Tensor(np.broadcast_to(logvar.data[None], eps.shape).reshape(kc * B, -1))
            log_q = _diag_gaussian_log_density(Tensor(eps.reshape(kc * B, -1)), lv)
            z, entropy = _posterior_push(model, zp, log_q)
            xt = np.broadcast_to(x[None], (kc, *x.shape)).reshape(kc * B, -1)
            lw = model.decoder.log_likelihood(xt, z) + model.prior.log_density(z) + entropy
            out[start : start + kc] = lw.data.reshape(kc, B)
    return out


def log_likelihood_importance(model, x, K, gen, batch_size=100):
    """Per-point importance-sampled estimate of ``log p(x)``."""
    x = np.asarray(x, dtype=np.float64)
    res = []
    for start in range(0, len(x), batch_size):
        lw = log_importance_weights(model, x[start : start + batch_size], K, gen)
        m = lw.max(axis=0)
        res.append(m + np.log(np.exp(lw - m).sum(axis=0)) - np.log(K))
    return np.concatenate(res)


def nll_importance(model, x, K, gen, batch_size=100):
    """Mean importance-sampled negative log-likelihood (nats)."""
    return float(-log_likelihood_importance(model, x, K, gen, batch_size).mean())


def aggregate_posterior_samples(model, dataset, n, gen):
    """``n`` draws of ``x ~ data``, ``z ~ g(q(z'|x))`` as an [n, latent] array."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    idx = gen.integers(0, len(dataset), size=n)
    with no_tape():
        zp, log_q = encode_and_sample(model, dataset[idx], gen)
        z, _ = _posterior_push(model, zp, log_q)
    return z.data


def aggregate_posterior_density(model, dataset, batch=2048):
    """Exact ``q(z) = mean_n q(z|x_n)`` as a vectorised density, for models without ``g``."""
    if model.posterior_flow.layers:
        raise ContractError("closed-form aggregate posterior needs an empty posterior flow")
    with no_tape():
        mu, logvar = model.encoder(Tensor(np.asarray(dataset, dtype=np.float64)))
    mu, var = mu.data, np.exp(logvar.data)
    log_norm = -0.5 * (np.log(2 * np.pi * var)).sum(axis=1)

    def fn(pts):
        out = np.empty(len(pts))
        for s in range(0, len(pts), batch):
            p = pts[s : s + batch]
            d2 = ((p[:, None, :] - mu[None]) ** 2 / var[None]).sum(axis=2)
            out[s : s + batch] = np.exp(logsumexp(log_norm[None] - 0.5 * d2, axis=1) - np.log(len(mu)))
        return out

    return fn


def prior_only_update(model, data_batch, optimizer, gen):
    """One ascent step on the objective with respect to the prior parameters only.

    Encoder, decoder and posterior flow are held fixed: the projected samples
    ``z = g(z')`` are computed off-tape, so only ``h`` receives gradient. This is
    maximum-likelihood fitting of the prior to the aggregate posterior.
    ``optimizer`` must be bound to the prior's parameters.
    """
    with no_tape():
        zp, log_q = encode_and_sample(model, data_batch, gen)
        z, _ = _posterior_push(model, zp, log_q)
    before = {k: p.data.copy() for k, p in optimizer.params.items()}
    with Tape() as tape:
        objective = model.prior.log_density(Tensor(z.data)).mean()
        loss = -objective
    grads = backward(loss, tape)
    flat = grads.for_params(optimizer.params)
    optimizer.step(flat)
    step = np.sqrt(sum(((p.data - before[k]) ** 2).sum() for k, p in optimizer.params.items()))
    grad_norm = np.sqrt(sum((g**2).sum() for g in flat.values()))
    return {"objective": objective.item(), "grad_norm": float(grad_norm),
            "step_norm": float(step), "gradients": grads}


def fit_prior(model, dataset, steps, batch_size, lr, gen, every=50, monitor=None):
    """Prior-only phase: ``steps`` Adam updates of ``h`` on aggregate-posterior draws.

    ``monitor(step)`` is called at step 0 and every ``every`` steps; its return
    values are collected and returned.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    optimizer = Adam(model.prior.parameters(), lr)
    trace = [monitor(0)] if monitor else []
    for step in range(1, steps + 1):
        idx = gen.integers(0, len(dataset), size=batch_size)
        prior_only_update(model, dataset[idx], optimizer, gen)
        if monitor and step % every == 0:
            trace.append(monitor(step))
    return trace


# ---------------------------------------------------------------------------
# closed-form linear-Gaussian oracle


class LinearGaussianOracle:
    """``z ~ N(0, I_d)``, ``x | z ~ N(W z + b, s^2 I_D)``: everything is analytic."""

    def __init__(self, W, b, noise_var):
        self.W = np.array(W, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        self.noise_var = float(noise_var)
        self.D, self.d = self.W.shape

    @classmethod
    def random(cls, gen, D=3, d=2, noise_var=None):
        W = gen.normal(size=(D, d))
        b = gen.normal(size=D)
        s2 = gen.uniform(0.2, 1.5) if noise_var is None else noise_var
        return cls(W, b, s2)

    def sample(self, n, gen):
        z = gen.standard_normal((n, self.d))
        return z @ self.W.T + self.b + np.sqrt(self.noise_var) * gen.standard_normal((n, self.D))

    def log_marginal(self, x):
        x = np.atleast_2d(x)
        cov = self.W @ self.W.T + self.noise_var * np.eye(self.D)
        L = np.linalg.cholesky(cov)
        r = np.linalg.solve(L, (x - self.b).T)
        return -0.5 * (r * r).sum(axis=0) - np.log(np.diag(L)).sum() - 0.5 * self.D * LOG_2PI

    def posterior(self, x):
        """Exact posterior mean [n, d] and shared covariance [d, d]."""
        x = np.atleast_2d(x)
        prec = np.eye(self.d) + self.W.T @ self.W / self.noise_var
        cov = np.linalg.inv(prec)
        mean = (x - self.b) @ self.W @ cov.T / self.noise_var
        return mean, cov

    def elbo(self, x, q_mean, q_cov):
        """Closed-form ``E_q[log p(x|z) + log p(z) - log q(z)]`` per point."""
        x = np.atleast_2d(x)
        q_mean = np.atleast_2d(q_mean)
        s2 = self.noise_var
        resid = x - q_mean @ self.W.T - self.b
        rec = (-0.5 * self.D * np.log(2 * np.pi * s2)
               - ((resid**2).sum(axis=1) + np.trace(self.W @ q_cov @ self.W.T)) / (2 * s2))
        prior = -0.5 * self.d * LOG_2PI - 0.5 * ((q_mean**2).sum(axis=1) + np.trace(q_cov))
        entropy = 0.5 * self.d * (1.0 + LOG_2PI) + 0.5 * np.linalg.slogdet(q_cov)[1]
        return rec + prior + entropy

    def as_model(self, mean_shift=0.0, var_scale=1.0):
        """An :class:`LedVae` whose diagonal ``q`` approximates the exact posterior."""
        prec = np.eye(self.d) + self.W.T @ self.W / self.noise_var
        cov = np.linalg.inv(prec)
        A = self.W @ cov.T / self.noise_var
        c = -self.b @ A + mean_shift
        encoder = LinearGaussianEncoder(A, c, np.log(np.diag(cov) * var_scale))
        decoder = LinearGaussianDecoder(self.W, self.b, self.noise_var)
        return LedVae(encoder, decoder, FlowChain(BaseDensity(self.d), []))


def gaussian_kl(m0, S0, m1, S1):
    """``KL(N(m0, S0) || N(m1, S1))`` for row-stacked means and shared covariances."""
    m0, m1 = np.atleast_2d(m0), np.atleast_2d(m1)
    k = S0.shape[0]
    S1inv = np.linalg.inv(S1)
    diff = m1 - m0
    maha = np.einsum("ni,ij,nj->n", diff, S1inv, diff)
    return 0.5 * (np.trace(S1inv @ S0) + maha - k
                  + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def elbo_identity_check(oracle, x, q_mean=None, q_cov=None):
    """``(elbo, log p(x), KL(q || p(z|x)))`` per point; exact posterior by default.

    The bound decomposes as ``elbo = log p(x) - KL``; all three are computed
    from independent closed forms.
    """
    post_mean, post_cov = oracle.posterior(x)
    q_mean = post_mean if q_mean is None else np.atleast_2d(q_mean)
    q_cov = post_cov if q_cov is None else q_cov
    elbo = oracle.elbo(x, q_mean, q_cov)
    return elbo, oracle.log_marginal(x), gaussian_kl(q_mean, q_cov, post_mean, post_cov)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    k_importance: int = 128
    eval_every: int = 1
    eval_batch: int = 100


@dataclass
class MetricsRow:
    epoch: int
    elbo: float
    reconstruction: float
    prior_term: float
    entropy_term: float
    val_nll_is: float
    wall_seconds: float

    COLUMNS = ("epoch", "elbo", "reconstruction", "prior_term", "entropy_term", "val_nll_is",
               "wall_seconds")


class Trainer:
    """Minibatch Adam ascent on :func:`elbo_led`; resumable from its state.

    Shuffling and reparameterisation noise come from the ``data-shuffle`` and
    ``reparam-noise`` streams of ``rng``. Validation NLL always uses a fresh
    ``eval`` stream, so it can be recomputed exactly from a checkpoint.
    """

    def __init__(self, model, config, rng):
        self.model = model
        self.config = config
        self.rng = rng
        self.params = model.parameters()
        self.optimizer = Adam(self.params, config.lr, config.beta1, config.beta2)
        self.epoch = 0
        self.trace = []

    def evaluate(self, X, K=None):
        K = self.config.k_importance if K is None else K
        return nll_importance(self.model, X, K, self.rng.fresh("eval"), self.config.eval_batch)

    def run_epoch(self, X):
        cfg = self.config
        shuffle = self.rng.stream("data-shuffle")
        noise = self.rng.stream("reparam-noise")
        order = shuffle.permutation(len(X))
        sums = dict.fromkeys(("elbo", "reconstruction", "prior_term", "entropy_term"), 0.0)
        n_batches = 0
        for start in range(0, len(X), cfg.batch_size):
            batch = X[order[start : start + cfg.batch_size]]
            snapshot = {k: p.data.copy() for k, p in self.params.items()}
            with Tape() as tape:
                terms = elbo_led(self.model, batch, noise)
                loss = -terms.elbo
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(
                    f"non-finite objective at epoch {self.epoch + 1}, batch {n_batches}",
                    step=self.optimizer.state.step, last_finite_state=snapshot)
            self.optimizer.step(backward(loss, tape))
            for k, v in terms.as_floats().items():
                sums[k] += v
            n_batches += 1
        return {k: v / max(n_batches, 1) for k, v in sums.items()}

    def fit(self, X, X_valid=None, epochs=None, on_epoch=None):
        """Train until ``epochs`` total epochs; ``on_epoch(trainer, row)`` after each.

        Training stops early when ``on_epoch`` returns a true value.
        """
        X = np.asarray(X, dtype=np.float64)
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            t0 = time.perf_counter()
            means = self.run_epoch(X)
            self.epoch += 1
            val = float("nan")
            if X_valid is not None and self.config.eval_every and self.epoch % self.config.eval_every == 0:
                val = self.evaluate(X_valid)
            means["elbo"] = means["reconstruction"] + means["prior_term"] + means["entropy_term"]
            row = MetricsRow(self.epoch, means["elbo"], means["reconstruction"], means["prior_term"],
                             means["entropy_term"], val, time.perf_counter() - t0)
            self.trace.append(row)
            if on_epoch is not None and on_epoch(self, row):
                break
        return self.trace


def train(model, dataset, config, rng, valid=None):
    """Train ``model`` in place and return the per-epoch :class:`MetricsRow` trace."""
    return Trainer(model, config, rng).fit(dataset, valid)
