"""Metrics and efficiency benchmarking: PSNR, token accuracy, a Gaussian-fit
Frechet proxy in latent space, parameter accounting, throughput, and peak
memory from the engine's own allocation counters.

Latent-space PSNR numbers are not comparable to pixel-space figures; the peak
defaults to the value range of the reference set.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, fields

import numpy as np
import scipy.linalg

from . import tensor as T

PSNR_CAP = 100.0
FRECHET_SHRINKAGE = 0.1


@dataclass
class EvalReport:
    psnr_db: float | None = None
    token_accuracy: float | None = None
    frechet_proxy: float | None = None
    params_billions: float | None = None
    samples_per_second: float | None = None
    peak_param_bytes: int | None = None

    def to_json(self) -> str:
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in payload.items():
            if v is None:
                payload[k] = "skipped"
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [
            ("PSNR (dB)", self.psnr_db, "{:.2f}"),
            ("Token accuracy", self.token_accuracy, "{:.4f}"),
            ("Frechet proxy", self.frechet_proxy, "{:.4f}"),
            ("Model Size (Billion)", self.params_billions, "{:.3f}"),
            ("Samples per second", self.samples_per_second, "{:.2f}"),
            ("Peak param bytes", self.peak_param_bytes, "{}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = []
        for label, value, fmt in rows:
            text = "skipped" if value is None else fmt.format(value)
            lines.append(f"{label:<{width}}  {text}")
        return "\n".join(lines)


def psnr(pred: np.ndarray, truth: np.ndarray, peak: float | None = None) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB for identical inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if peak is None:
        peak = float(truth.max() - truth.min()) or 1.0
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(((pred - truth) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def token_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float((pred == truth).mean())


def _gaussian_fit(samples: np.ndarray, shrinkage: float):
    mu = samples.mean(axis=0)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    cov = np.cov(samples, rowvar=False)
    cov = np.atleast_2d(cov)
    cov = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    return mu, cov


def frechet_gaussian_proxy(set_a: np.ndarray, set_b: np.ndarray,
                           shrinkage: float = FRECHET_SHRINKAGE) -> float:
    """2-Wasserstein distance between Gaussian fits of two sample sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) on diagonal-shrunk
    covariances. Sets are (n, d) with rows as samples.
    """
    a = np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    mu_a, cov_a = _gaussian_fit(a, shrinkage)
    mu_b, cov_b = _gaussian_fit(b, shrinkage)
    diff = mu_a - mu_b
    covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    covmean = np.real(covmean)
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(d2, 0.0)


@dataclass
class BenchReport:
    samples_per_second: dict[int, float]   # batch size -> median throughput
    peak_bytes: int
    param_bytes: int

    def to_table(self) -> str:
        lines = [f"{'Batch':>6}  {'Samples/s':>10}"]
        for bs, sps in sorted(self.samples_per_second.items()):
            lines.append(f"{bs:>6}  {sps:>10.3f}")
        lines.append(f"param bytes : {self.param_bytes}")
        lines.append(f"peak bytes  : {self.peak_bytes}")
        return "\n".join(lines)


def bench(run_fn, store, batch_sizes=(1, 4), repetitions: int = 5,
          warmup: int = 1) -> BenchReport:
    """Median samples/second of `run_fn(batch_size)` plus memory accounting.

    `run_fn` must execute one full inference for the given batch size. Peak
    bytes come from the tensor engine's allocation tracker; parameter bytes
    are 4 x the unique parameter count (float32 storage).
    """
    results = {}
    T.allocations.reset_peak()
    for bs in batch_sizes:
        for _ in range(warmup):
            run_fn(bs)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            run_fn(bs)
            times.append(time.perf_counter() - t0)
        results[bs] = bs / statistics.median(times)
    return BenchReport(samples_per_second=results,
                       peak_bytes=T.allocations.peak,
                       param_bytes=store.nbytes())
