"""Training loops (normalized-diversity model, GAN and VAE baselines,
forward kinematics model), action sampling and evaluation."""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import losses, metrics, nets
from .data import sample_star_actions

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
TRACE_NAMES = ("ndiv", "d", "g", "ae", "recon", "vae")
LR_DECAYS = ("none", "linear")


class NumericFailure(FloatingPointError):
    def __init__(self, step, loss_name, value):
        super().__init__(f"non-finite {loss_name} loss ({value}) at step {step}")
        self.step = step
        self.loss_name = loss_name
        self.value = value

    def __reduce__(self):
        return type(self), (self.step, self.loss_name, self.value)


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 20000
    batch_states: int = 16
    n_div_samples: int = 32
    alpha: float = 0.8
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    lr_f: float = 1e-3
    lr_vae: float = 1e-3
    w_adv: float = 1.0
    w_ndiv: float = 5.0
    w_ae: float = 1.0
    d_steps_per_g: int = 2
    real_batch: int = 32
    batch_size: int = 64
    vae_beta: float = 1.0
    forward_steps: int = 20000
    # adversarial optimizers only; the VAE and forward model use (0.9, 0.999)
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    lr_decay: str = "none"
    g_ema: float = 0.999

    def __post_init__(self):
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"lr_decay must be one of {LR_DECAYS}, got {self.lr_decay!r}")
        if self.n_div_samples < 2:
            raise ValueError("n_div_samples must be >= 2")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lr_decay":
                continue
            if f.name == "g_ema":
                if not 0.0 <= v < 1.0:
                    raise ValueError(f"g_ema must be in [0, 1), got {v}")
                continue
            if f.name in ("seed", "steps", "forward_steps", "w_ndiv", "w_ae", "w_adv", "adam_beta1"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0, got {v}")
            elif not v > 0:
                raise ValueError(f"{f.name} must be > 0, got {v}")

    def replace(self, **changes):
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self):
        return {"schema_version": CONFIG_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class TrainReport:
    model: str
    traces: dict = field(default_factory=dict)
    collapse_warnings: int = 0
    collapse_warnings_last_1000: int = 0
    wall_clock: float = 0.0
    checkpoint: str = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d.pop("traces")
        d["steps"] = max((len(v) for v in self.traces.values()), default=0)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write_traces_csv(self, path):
        """Per-step losses; columns are the trace names present, step first."""
        names = [n for n in TRACE_NAMES if n in self.traces]
        length = max((len(self.traces[n]) for n in names), default=0)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", *names])
            for i in range(length):
                row = [str(i)]
                for n in names:
                    t = self.traces[n]
                    row.append(repr(float(t[i])) if i < len(t) else "")
                w.writerow(row)


def _rng_streams(seed):
    init, data, latent = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(data), np.random.default_rng(latent)


def lr_factor(config, step):
    """Multiplier on the adversarial learning rates at ``step``."""
    if config.lr_decay == "linear" and config.steps > 0:
        return 1.0 - step / config.steps
    return 1.0


def _finite(step, name, value):
    if not math.isfinite(value):
        raise NumericFailure(step, name, value)
    return value


def _state_batch(dataset, config, rng):
    if dataset.fixed_state():
        return dataset.s_t[:1]
    idx = rng.integers(0, len(dataset), config.batch_states)
    return dataset.s_t[idx]


class AdversarialTrainer:
    """Alternating hinge-GAN updates with optional normalized-diversity and
    auto-encoder terms on the generator side.

    ``w_ndiv = w_ae = 0`` gives the plain spectrally normalized GAN baseline
    over the identical architecture, initialization and rng streams.
    """

    def __init__(self, dataset, config, kind="ours", bundle=None):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.dataset = dataset
        self.config = config
        init_rng, self.data_rng, self.latent_rng = _rng_streams(config.seed)
        self.bundle = bundle or nets.build_model_bundle(kind, init_rng)
        b = self.bundle
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = dc.Adam(b.generator_parameters(), config.lr_g, betas)
        self.opt_d = dc.Adam(b.discriminator.parameters, config.lr_d, betas)
        self.ndiv_cfg = losses.NdivConfig(config.alpha, config.n_div_samples)
        self.step_count = 0
        self.report = TrainReport(b.kind, {n: [] for n in ("ndiv", "d", "g", "ae")})
        # shadow copy of the generator-side weights, swapped in by ``run``
        self.ema = [p.data.copy() for p in b.generator_parameters()] if config.g_ema > 0 else None

    def _update_ema(self):
        decay = self.config.g_ema
        for shadow, p in zip(self.ema, self.bundle.generator_parameters()):
            shadow *= decay
            shadow += (1.0 - decay) * p.data

    def averaged_bundle(self):
        """Copy the averaged generator weights into the bundle (no-op without EMA)."""
        if self.ema is not None:
            for shadow, p in zip(self.ema, self.bundle.generator_parameters()):
                p.data = shadow.copy()
        return self.bundle

    def _latents(self, n_states):
        n = self.config.n_div_samples
        return self.latent_rng.random((n_states, n, self.bundle.arch.latent_dim))

    def discriminator_batch(self):
        """Draw one D-step minibatch: real (state, action) pairs, fake states and latents."""
        idx = self.data_rng.integers(0, len(self.dataset), self.config.real_batch)
        states = _state_batch(self.dataset, self.config, self.data_rng)
        return self.dataset.s_t[idx], self.dataset.actions[idx], states, self._latents(len(states))

    def discriminator_loss(self, batch, update_sn=True):
        b = self.bundle
        real_s, real_a, states, z = batch
        with dc.no_grad():
            fake_e = nets.encode_state(b, states)
            fakes = [nets.generate_action(b, fake_e[k], z[k]) for k in range(len(states))]
            real_e = nets.encode_state(b, real_s)
        fake_a = np.concatenate([f.data for f in fakes])
        fake_e_rows = np.repeat(fake_e.data, z.shape[1], axis=0)
        actions = np.concatenate([real_a, fake_a])
        embed = np.concatenate([real_e.data, fake_e_rows])
        scores = nets.discriminate(b, actions, embed, update_sn=update_sn)
        n_real = len(real_a)
        return losses.hinge_discriminator_loss(scores[:n_real], scores[n_real:])

    def discriminator_step(self, batch=None):
        batch = batch if batch is not None else self.discriminator_batch()
        loss = self.discriminator_loss(batch)
        value = loss.item()
        self.opt_d.step(dc.backward(loss))
        return value

    def generator_step(self):
        b, cfg = self.bundle, self.config
        states = _state_batch(self.dataset, cfg, self.data_rng)
        z = self._latents(len(states))
        e = nets.encode_state(b, states)
        g_terms, ndiv_terms, collapsed = [], [], 0
        for k in range(len(states)):
            ek = e[k]
            actions = nets.generate_action(b, ek, z[k])
            g_terms.append(losses.hinge_generator_loss(nets.discriminate(b, actions, ek, update_sn=False)))
            if cfg.w_ndiv > 0:
                nd, degenerate = losses.ndiv_from_samples(z[k], actions, self.ndiv_cfg)
                ndiv_terms.append(nd)
            else:
                with dc.no_grad():
                    nd, degenerate = losses.ndiv_from_samples(z[k], dc.detach(actions), self.ndiv_cfg)
            collapsed += degenerate > 0
        scale = 1.0 / len(states)
        l_g = dc.sum(dc.concat([dc.reshape(t, (1,)) for t in g_terms])) * scale
        total = cfg.w_adv * l_g
        if ndiv_terms:
            l_ndiv = dc.sum(dc.concat([dc.reshape(t, (1,)) for t in ndiv_terms])) * scale
            ndiv_value = l_ndiv.item()
            total = total + cfg.w_ndiv * l_ndiv
        else:
            ndiv_value = nd.item()
        l_ae = losses.reconstruction_loss(nets.decode_state(b, e), states)
        if cfg.w_ae > 0:
            total = total + cfg.w_ae * l_ae
        values = {"g": l_g.item(), "ndiv": ndiv_value, "ae": l_ae.item()}
        self.opt_g.step(dc.backward(total))
        return values, collapsed

    def step(self):
        i = self.step_count
        trace = self.report.traces
        f = lr_factor(self.config, i)
        self.opt_g.lr = self.config.lr_g * f
        self.opt_d.lr = self.config.lr_d * f
        for _ in range(self.config.d_steps_per_g):
            d_value = self.discriminator_step()
        trace["d"].append(_finite(i, "d", d_value))
        values, collapsed = self.generator_step()
        if self.ema is not None:
            self._update_ema()
        for name, v in values.items():
            trace[name].append(_finite(i, name, v))
        if collapsed:
            self.report.collapse_warnings += 1
            if i >= self.config.steps - 1000:
                self.report.collapse_warnings_last_1000 += 1
        self.step_count += 1

    def run(self):
        start = time.perf_counter()
        for _ in range(self.config.steps):
            self.step()
        self.report.wall_clock += time.perf_counter() - start
        return self.averaged_bundle(), self.report


def train_ours(dataset, config=TrainConfig()):
    """Hinge GAN + normalized diversity + state auto-encoder."""
    return AdversarialTrainer(dataset, config, "ours").run()


def train_gan_baseline(dataset, config=TrainConfig()):
    """Spectrally normalized hinge GAN: no diversity and no auto-encoder term."""
    config = config.replace(w_ndiv=0.0, w_ae=0.0)
    return AdversarialTrainer(dataset, config, "gan").run()


def vae_forward(bundle, actions, eps):
    out = bundle.vae_encoder(actions)
    dz = bundle.arch.latent_dim
    mu, logvar = out[:, :dz], out[:, dz:]
    z = mu + dc.exp(0.5 * logvar) * eps
    return bundle.action_decoder(z), mu, logvar


def vae_reconstruct(bundle, actions):
    """Decode the posterior means of ``actions``."""
    with dc.no_grad():
        out = bundle.vae_encoder(np.asarray(actions, dtype=np.float64))
        return bundle.action_decoder(out[:, : bundle.arch.latent_dim]).data


def train_vae_baseline(dataset, config=TrainConfig()):
    """VAE over actions with a standard-normal prior."""
    init_rng, data_rng, latent_rng = _rng_streams(config.seed)
    bundle = nets.build_model_bundle("vae", init_rng)
    params = bundle.vae_encoder.parameters + bundle.action_decoder.parameters
    opt = dc.Adam(params, config.lr_vae)
    report = TrainReport("vae", {"vae": []})
    start = time.perf_counter()
    batch = min(config.batch_size, len(dataset))
    for i in range(config.steps):
        idx = data_rng.integers(0, len(dataset), batch)
        a = dataset.actions[idx]
        eps = latent_rng.standard_normal((batch, bundle.arch.latent_dim))
        recon, mu, logvar = vae_forward(bundle, a, eps)
        loss = losses.vae_elbo_loss(recon, a, mu, logvar, config.vae_beta)
        report.traces["vae"].append(_finite(i, "vae", loss.item()))
        opt.step(dc.backward(loss))
    report.wall_clock = time.perf_counter() - start
    return bundle, report


def forward_model_error(bundle, dataset):
    """Mean Euclidean error of predicted next states over ``dataset``."""
    with dc.no_grad():
        pred = nets.predict_next_state(bundle, dataset.s_t, dataset.actions).data
    return float(np.mean(np.linalg.norm(pred - dataset.s_next, axis=1)))


def train_forward_model(dataset, config=TrainConfig(), bundle=None, test=None):
    """Regress next states with the unsquared Euclidean loss.

    Trains ``bundle.forward_model`` in place (a fresh ``ours`` bundle when
    none is given). The held-out error on ``test`` is stored in
    ``report.extra["heldout_error"]``.
    """
    init_rng, data_rng, _ = _rng_streams(config.seed)
    if bundle is None:
        bundle = nets.build_model_bundle("ours", init_rng)
    fwd = bundle.forward_model
    opt = dc.Adam(fwd.parameters, config.lr_f)
    report = TrainReport(bundle.kind, {"recon": []})
    steps = config.forward_steps
    batch = min(config.batch_size, len(dataset))
    start = time.perf_counter()
    for i in range(steps):
        # cosine decay to 1% of the base rate
        opt.lr = config.lr_f * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * i / steps)))
        idx = data_rng.integers(0, len(dataset), batch)
        pred = nets.predict_next_state(bundle, dataset.s_t[idx], dataset.actions[idx])
        loss = losses.reconstruction_loss(pred, dataset.s_next[idx])
        report.traces["recon"].append(_finite(i, "recon", loss.item()))
        opt.step(dc.backward(loss))
    report.wall_clock = time.perf_counter() - start
    report.extra["train_error"] = forward_model_error(bundle, dataset)
    if test is not None:
        report.extra["heldout_error"] = forward_model_error(bundle, test)
    return bundle, report


TRAINERS = {"ours": train_ours, "gan": train_gan_baseline, "vae": train_vae_baseline}


def train_model(kind, dataset, config=TrainConfig(), test=None, with_forward=True):
    """Train the action generator of ``kind`` and, optionally, the shared
    forward model into the same bundle."""
    bundle, report = TRAINERS[kind](dataset, config)
    if with_forward:
        _, fwd_report = train_forward_model(dataset, config, bundle, test)
        report.traces.update(fwd_report.traces)
        report.extra.update(fwd_report.extra)
        report.wall_clock += fwd_report.wall_clock
    return bundle, report


def sample_actions(bundle, s_t=None, n=10000, seed=0):
    """``n`` actions from a trained bundle; latents are U(0,1)^d for the
    adversarial models and N(0, I) for the VAE."""
    rng = np.random.default_rng(seed)
    dz = bundle.arch.latent_dim
    with dc.no_grad():
        if bundle.kind == "vae":
            z = rng.standard_normal((n, dz))
            return bundle.action_decoder(z).data
        if s_t is None:
            s_t = np.zeros(bundle.arch.state_dim)
        z = rng.random((n, dz))
        e = nets.encode_state(bundle, s_t)
        return nets.generate_action(bundle, e, z).data


def predict_states(bundle, actions, s_t=None):
    if s_t is None:
        s_t = np.zeros(bundle.arch.state_dim)
    with dc.no_grad():
        return nets.predict_next_state(bundle, s_t, actions).data


def evaluate(bundle, dataset_test, spec, n=10000, seeds=5, base_seed=0, bins=metrics.DEFAULT_BINS):
    """Metrics of generated vs. fresh ground-truth star actions, averaged
    over ``seeds`` independent sampling seeds."""
    reports = []
    s_t = dataset_test.s_t[0] if dataset_test is not None else None
    for k in range(seeds):
        gen_ss, truth_ss = np.random.SeedSequence([base_seed, k]).spawn(2)
        generated = sample_actions(bundle, s_t, n, gen_ss)
        truth = sample_star_actions(spec, n, np.random.default_rng(truth_ss))
        inside, per_arm = metrics.star_coverage(generated, spec)
        reports.append(
            metrics.MetricsReport(
                frechet_distance=metrics.frechet_distance_samples(generated, truth),
                js_divergence=metrics.js_divergence(generated, truth, bins=bins),
                inside_fraction=inside,
                per_arm_mass=per_arm,
                model=bundle.kind,
                bins=bins,
            )
        )
    report = metrics.aggregate_reports(reports, bundle.kind)
    if dataset_test is not None:
        report.extra["forward_heldout_error"] = forward_model_error(bundle, dataset_test)
    return report
