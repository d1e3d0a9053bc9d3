"""Pinned-seed trend study: MD, MD+, MD++ and independent models on every configuration.

Each seed generates its own synthetic dataset, trains every regime on the
first 80% of subjects and evaluates DSC on the held-out 20% for all
2^K - 1 modality codes. A claim holds when it holds for a majority of seeds.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig, parse_config_text
from .data import generate_dataset
from .moddrop import enumerate_configs
from .trainer import evaluate, feature_similarity, run_training, split_subjects

log = logging.getLogger(__name__)

LABELS = {"moddrop": "MD", "moddrop_plus": "MD+", "moddrop_plus_plus": "MD++", "independent": "IM"}

# Desk-scale settings shared by the study and the committed trend config.
TREND_CONFIG = """\
synth.size=32
synth.lesions=3,7
synth.lesion_radius=1.5,3.5
synth.contrast=0.35,1.0,0.5,0.3
synth.distractor_amplitude=0.35,0.0,0.5,0.35
synth.distractors=2,5
synth.noise_sigma=0.1
model.first_layer_out=16
model.dense_blocks=2
model.layers_per_block=2
model.growth_rate=4
train.epochs=60
train.decay_start_epoch=20
train.batch_size=1
train.lr0=0.002
eval.subjects=25
"""


def trend_config() -> RunConfig:
    cfg = parse_config_text(TREND_CONFIG, source="trend")
    cfg.validate()
    return cfg


@dataclass
class SeedResult:
    seed: int
    codes: list[str]
    dsc: dict[str, np.ndarray] = field(default_factory=dict)  # label -> per-code DSC
    ssim: dict[float, float] = field(default_factory=dict)  # co-training gamma -> held-out SSIM
    seconds: dict[str, float] = field(default_factory=dict)


@dataclass
class Verdict:
    name: str
    claim: str
    votes: list[bool]
    details: list[str]

    @property
    def passed(self) -> bool:
        return sum(self.votes) * 2 > len(self.votes)


def _train(cfg: RunConfig, train, regime: str, seed: int, code: str | None = None, gamma: float | None = None):
    tcfg = replace(cfg.train, regime=regime, seed=seed, code=code)
    lcfg = replace(cfg.loss, gamma=cfg.loss.gamma if gamma is None else gamma)
    return run_training(train, cfg.model, tcfg, lcfg, cfg.drop)


def run_seed(cfg: RunConfig, seed: int, regimes=("moddrop", "moddrop_plus", "moddrop_plus_plus", "independent"),
             ssim_gammas: tuple[float, ...] = (0.0,)) -> SeedResult:
    """Train and evaluate every requested regime for one seed.

    ``ssim_gammas`` lists extra co-training weights whose held-out feature
    SSIM is measured next to the configured one (the MD++ run is reused).
    """
    cfg = cfg.copy()
    cfg.validate()
    synth = replace(cfg.synth, seed=seed)
    dataset = generate_dataset(synth, cfg.eval.subjects)
    train, test = split_subjects(dataset, cfg.eval.test_fraction)
    codes = enumerate_configs(cfg.synth.k)
    result = SeedResult(seed, [str(c) for c in codes])

    def score(model, which):
        reports = evaluate(model, test, which, cfg.eval.threshold, cfg.eval.min_overlap)
        return np.array([reports[str(c)].dsc for c in which])

    for regime in regimes:
        label = LABELS[regime]
        start = time.process_time()
        if regime == "independent":
            dsc = np.array([score(_train(cfg, train, regime, seed, str(c)).model, [c])[0] for c in codes])
        else:
            res = _train(cfg, train, regime, seed)
            dsc = score(res.model, codes)
            if regime == "moddrop_plus_plus" and ssim_gammas:
                result.ssim[cfg.loss.gamma] = feature_similarity(res.model, test, codes[1:], cfg.loss)
        result.dsc[label] = dsc
        result.seconds[label] = time.process_time() - start
        log.info("seed %d %-5s mean DSC %.4f (%.0fs)", seed, label, dsc.mean(), result.seconds[label])

    for gamma in ssim_gammas:
        if gamma in result.ssim:
            continue
        res = _train(cfg, train, "moddrop_plus_plus", seed, gamma=gamma)
        result.ssim[gamma] = feature_similarity(res.model, test, codes[1:], cfg.loss)
    return result


def flair_pairs(codes: list[str], flair_bit: int = 1) -> list[tuple[int, int]]:
    """Index pairs (FLAIR absent, same code with FLAIR present)."""
    pairs = []
    for i, c in enumerate(codes):
        if c[flair_bit] == "0":
            present = c[:flair_bit] + "1" + c[flair_bit + 1:]
            pairs.append((i, codes.index(present)))
    return pairs


def judge(results: list[SeedResult], gamma: float = 0.05) -> dict[str, Verdict]:
    """Per-seed votes for each trend claim."""
    out = {
        "a": Verdict("a", "MD+ >= MD on >= 12/15 configurations", [], []),
        "b": Verdict("b", "MD++ >= MD+ on >= 10/15 configurations", [], []),
        "c": Verdict("c", "FLAIR-absent DSC < matched FLAIR-present DSC for every regime", [], []),
        "d": Verdict("d", f"held-out SSIM(f, f_i) higher with gamma={gamma} than gamma=0", [], []),
        "e": Verdict("e", "mean(IM - MD++) < mean(IM - MD)", [], []),
    }
    for r in results:
        n = len(r.codes)
        scale = n / 15.0
        d = r.dsc
        if "MD" in d and "MD+" in d:
            k = int(np.sum(d["MD+"] >= d["MD"]))
            out["a"].votes.append(k >= 12 * scale)
            out["a"].details.append(f"seed {r.seed}: {k}/{n}")
        if "MD+" in d and "MD++" in d:
            k = int(np.sum(d["MD++"] >= d["MD+"]))
            out["b"].votes.append(k >= 10 * scale)
            out["b"].details.append(f"seed {r.seed}: {k}/{n}")
        pairs = flair_pairs(r.codes)
        if pairs:
            per = {lab: sum(v[i] < v[j] for i, j in pairs) for lab, v in d.items()}
            out["c"].votes.append(all(k == len(pairs) for k in per.values()))
            out["c"].details.append(f"seed {r.seed}: " + ", ".join(f"{lab} {k}/{len(pairs)}" for lab, k in per.items()))
        if gamma in r.ssim and 0.0 in r.ssim:
            out["d"].votes.append(r.ssim[gamma] > r.ssim[0.0])
            out["d"].details.append(f"seed {r.seed}: {r.ssim[gamma]:.4f} vs {r.ssim[0.0]:.4f}")
        if "IM" in d and "MD" in d and "MD++" in d:
            gap_pp = float(np.mean(d["IM"] - d["MD++"]))
            gap_md = float(np.mean(d["IM"] - d["MD"]))
            out["e"].votes.append(gap_pp < gap_md)
            out["e"].details.append(f"seed {r.seed}: {gap_pp:+.4f} vs {gap_md:+.4f}")
    return out


def run_study(cfg: RunConfig | None = None, seeds=(0, 1, 2), **kwargs) -> list[SeedResult]:
    cfg = cfg or trend_config()
    return [run_seed(cfg, s, **kwargs) for s in seeds]


def format_results(results: list[SeedResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"seed {r.seed}   " + " ".join(f"{c:>5}" for c in r.codes) + "   mean")
        for lab, v in r.dsc.items():
            lines.append(f"  {lab:<8} " + " ".join(f"{x:5.2f}" for x in v) + f"  {v.mean():.3f}")
    return "\n".join(lines)
