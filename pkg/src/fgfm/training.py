"""Training and scoring loops over manifests."""
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from .data import ScoreRecord, compute_eer, read_feature_file


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    lr_schedule: str = "constant"  # or "cosine"
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class DataConfig:
    sample_rate: int = 8000
    duration: float = 0.64
    num_harmonics: int = 4
    noise: float = 0.002
    f0_min: float = 80.0
    f0_max: float = 160.0
    artifact_kind: str = "splice"
    num_train: int = 800
    num_dev: int = 100
    num_test: int = 200
    window_min: float = 0.05
    window_max: float = 0.10
    seed: int = 1234
    manifest_dir: str = "data"
    feature_dir: str = ""

    def to_dict(self):
        return asdict(self)

    def synth_kwargs(self, hop):
        return dict(sample_rate=self.sample_rate, duration=self.duration,
                    num_harmonics=self.num_harmonics, noise=self.noise,
                    f0_range=(self.f0_min, self.f0_max), hop=hop)


def load_inputs(entries, model_cfg, data_cfg):
    """Model inputs (waveforms or feature matrices), labels and artifact masks."""
    from .data import generate_utterance

    inputs, labels, masks = [], [], []
    feature_dir = data_cfg.feature_dir or os.path.join(data_cfg.manifest_dir, "features")
    for e in entries:
        if model_cfg.frontend == "feature_file":
            x = read_feature_file(os.path.join(feature_dir, f"{e.utt_id}.fgft"))
            mask = np.zeros(x.shape[0], dtype=bool)
            if e.label == "spoof":
                mask[e.window_start:e.window_start + e.window_len] = True
        else:
            x, mask = generate_utterance(e.synth_spec(**data_cfg.synth_kwargs(model_cfg.stride_product)))
        inputs.append(x)
        labels.append(M.LABELS[e.label])
        masks.append(mask)
    return inputs, labels, masks


def score_inputs(entries, inputs, params, model_cfg):
    """Score records and per-utterance diagnostics (no gradients recorded)."""
    records, diags = [], []
    for e, x in zip(entries, inputs):
        score, diag = M.predict(x, params, model_cfg)
        records.append(ScoreRecord(e.utt_id, e.label, score))
        diags.append(diag)
    return records, diags


def learning_rate(train_cfg, step, total_steps):
    if train_cfg.lr_schedule == "cosine":
        return 0.5 * train_cfg.lr * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
    return train_cfg.lr


def train_model(train_entries, train_inputs, train_labels, model_cfg, train_cfg,
                dev_entries=None, dev_inputs=None, log=None):
    """Seeded minibatch training; ``log`` receives one metrics dict per epoch."""
    params = M.init_parameters(model_cfg)
    state = M.AdamState(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay, grad_clip=train_cfg.grad_clip)
    rng = np.random.default_rng(train_cfg.seed)
    drop_rng = np.random.default_rng([train_cfg.seed, 7]) if model_cfg.encoder.dropout_rate > 0 else None
    n = len(train_inputs)
    steps_per_epoch = -(-n // train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, train_cfg.batch_size):
            batch = [(train_inputs[i], train_labels[i]) for i in order[start:start + train_cfg.batch_size]]
            state.lr = learning_rate(train_cfg, state.step, total_steps)
            loss, state = M.train_step(batch, params, state, model_cfg, drop_rng)
            losses.append(loss)
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if dev_entries:
            dev_records, _ = score_inputs(dev_entries, dev_inputs, params, model_cfg)
            record["dev_eer"] = compute_eer(dev_records)[0]
        history.append(record)
        if log is not None:
            log(record)
    return params, history
