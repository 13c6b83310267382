"""scikit-learn style wrappers around the functional core."""

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import Adam, Rng, Tape, Tensor, backward, no_tape
from .flows import build_coupling_chain
from .made import IDENTITY_SCALE_BIAS, build_iaf_chain
from .nica import GridDensity, fit_conditional_cdfs
from .vae import TrainConfig, Trainer, build_led_vae, log_likelihood_importance


def _seed(random_state):
    return 0 if random_state is None else int(random_state)


class FlowDensityEstimator(DensityMixin, BaseEstimator):
    """Maximum-likelihood normalizing flow on continuous data.

    ``kind="nvp"`` stacks affine coupling layers on a standard normal base;
    ``kind="iaf"`` stacks MADE-conditioned affine autoregressive layers.
    ``transform`` maps data to the base space.
    """

    def __init__(self, kind="nvp", n_layers=4, hidden_sizes=(100,), epochs=50, batch_size=256,
                 lr=1e-3, activation="relu", random_state=None):
        self.kind = kind
        self.n_layers = n_layers
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.activation = activation
        self.random_state = random_state

    def _build(self, dim, rng):
        if self.kind == "nvp":
            return build_coupling_chain(dim, self.n_layers, rng.stream("init"), rng.stream("mask-choice"),
                                        tuple(self.hidden_sizes), activation=self.activation)
        if self.kind == "iaf":
            return build_iaf_chain(dim, self.n_layers, rng.stream("init"), rng.stream("mask-choice"),
                                   tuple(self.hidden_sizes), scale_bias=IDENTITY_SCALE_BIAS,
                                   activation=self.activation)
        raise ValueError(f"kind must be 'nvp' or 'iaf', got {self.kind!r}")

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_features=2)
        rng = Rng(_seed(self.random_state))
        self.flow_ = self._build(X.shape[1], rng)
        self.n_features_in_ = X.shape[1]
        params = self.flow_.parameters()
        opt = Adam(params, self.lr)
        shuffle = rng.stream("data-shuffle")
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = shuffle.permutation(len(X))
            total = 0.0
            for s in range(0, len(X), self.batch_size):
                batch = Tensor(X[order[s : s + self.batch_size]])
                with Tape() as tape:
                    loss = -self.flow_.log_density(batch).mean()
                opt.step(backward(loss, tape))
                total += loss.item() * len(batch.data)
            self.loss_curve_.append(total / len(X))
        return self

    def score_samples(self, X):
        check_is_fitted(self, "flow_")
        X = check_array(X, dtype=np.float64)
        with no_tape():
            return self.flow_.log_density(Tensor(X)).data

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "flow_")
        return self.flow_.sample(n_samples, np.random.default_rng(random_state))

    def transform(self, X):
        check_is_fitted(self, "flow_")
        X = check_array(X, dtype=np.float64)
        with no_tape():
            return self.flow_.inverse(Tensor(X))[0].data

    def inverse_transform(self, Z):
        check_is_fitted(self, "flow_")
        Z = check_array(Z, dtype=np.float64)
        with no_tape():
            return self.flow_.forward(Tensor(Z))[0].data


class LedVAE(DensityMixin, TransformerMixin, BaseEstimator):
    """VAE with optional learnable flow prior and flow posterior.

    ``transform`` returns encoder means; ``score_samples`` returns importance
    sampled ``log p(x)`` with ``k_importance`` samples.
    """

    def __init__(self, latent_dim=2, likelihood="gaussian", l_prior=0, prior_kind="nvp",
                 prior_hidden=(100,), l_post=0, post_kind="made", post_hidden=(512, 512),
                 enc_hidden=(200, 200), dec_hidden=(200, 200), activation="relu",
                 epochs=10, batch_size=100, lr=1e-3, k_importance=128, random_state=None):
        self.latent_dim = latent_dim
        self.likelihood = likelihood
        self.l_prior = l_prior
        self.prior_kind = prior_kind
        self.prior_hidden = prior_hidden
        self.l_post = l_post
        self.post_kind = post_kind
        self.post_hidden = post_hidden
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.k_importance = k_importance
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = Rng(_seed(self.random_state))
        self.model_ = build_led_vae(
            X.shape[1], self.latent_dim, rng, likelihood=self.likelihood,
            enc_hidden=self.enc_hidden, dec_hidden=self.dec_hidden, l_prior=self.l_prior,
            prior_kind=self.prior_kind, prior_hidden=self.prior_hidden, l_post=self.l_post,
            post_kind=self.post_kind, post_hidden=self.post_hidden, activation=self.activation)
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             k_importance=self.k_importance, eval_every=0)
        self.trainer_ = Trainer(self.model_, config, rng)
        self.trainer_.fit(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        with no_tape():
            mean, _ = self.model_.encoder(Tensor(X))
        return mean.data

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        gen = self.trainer_.rng.fresh("eval")
        return log_likelihood_importance(self.model_, X, self.k_importance, gen)

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def sample(self, n_samples=1, random_state=None):
        """Decoder means at prior draws."""
        check_is_fitted(self, "model_")
        z = self.model_.prior.sample(n_samples, np.random.default_rng(random_state))
        return self.model_.decoder.mean(z)


class ConditionalCDFTransformer(TransformerMixin, BaseEstimator):
    """Maps 2-D data to independent uniforms via a histogram's conditional CDFs.

    The histogram is taken over ``box`` with ``resolution`` cells per axis and
    ``pseudocount`` added to every cell so that no slice is empty.
    """

    def __init__(self, box=((-4.0, 4.0), (-4.0, 4.0)), resolution=64, pseudocount=1e-3):
        self.box = box
        self.resolution = resolution
        self.pseudocount = pseudocount

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError("ConditionalCDFTransformer expects 2 features")
        res = self.resolution
        counts, _, _ = np.histogram2d(X[:, 0], X[:, 1], bins=[res, res], range=list(self.box))
        counts = counts + self.pseudocount
        self.density_ = GridDensity(self.box, (res, res), counts / counts.sum())
        self.transform_ = fit_conditional_cdfs(self.density_)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.transform(check_array(X, dtype=np.float64))

    def inverse_transform(self, Y):
        check_is_fitted(self, "transform_")
        return self.transform_.inverse(check_array(Y, dtype=np.float64))
