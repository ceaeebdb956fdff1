"""Shared fixtures.

The expensive end-to-end reconstructions (full prior stack and the
depth/normal-free ablation) are session scoped so the pipeline runs once and
every test that needs a trained model reuses the result.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest
from hypothesis import settings

from uwsdf.assets import PipelineConfig
from uwsdf.field import SphereField
from uwsdf.meshing import marching_cubes
from uwsdf.metrics import acc_comp
from uwsdf.synth import SynthSceneSpec, generate_dataset
from uwsdf.training import load_dataset, train

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")

BOUNDS = (np.full(3, -1.0), np.full(3, 1.0))

# Populated by the acceptance tests: criterion number -> measured details.
ACCEPTANCE_DETAILS: dict[int, str] = {}
_ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_"):
        _ACCEPTANCE_RESULTS[int(name.split("_")[2])] = report.outcome


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per release criterion at the end of the run."""
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE_RESULTS):
        status = "PASS" if _ACCEPTANCE_RESULTS[num] == "passed" else "FAIL"
        detail = ACCEPTANCE_DETAILS.get(num, "")
        terminalreporter.line(f"[criterion {num:02d}] {status} {detail}".rstrip())


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sphere_ds")
    spec = SynthSceneSpec(
        field=SphereField(radius=0.5),
        num_views=20,
        image_size=64,
        seed=0,
    )
    generate_dataset(spec, out)
    return out


@pytest.fixture(scope="session")
def sphere_gt_mesh():
    return marching_cubes(SphereField(radius=0.5), BOUNDS, 64)


def _run_pipeline(dataset_dir, out_dir, gt_mesh, **overrides):
    cfg = PipelineConfig(dataset_dir=str(dataset_dir), out_dir=str(out_dir))
    cfg = dataclasses.replace(cfg, **overrides)
    ds = load_dataset(dataset_dir, cfg)
    t0 = time.monotonic()
    model, log = train(ds, cfg)
    train_seconds = time.monotonic() - t0
    mesh = marching_cubes(model.sdf, BOUNDS, cfg.grid_resolution)
    acc, comp = acc_comp(mesh, gt_mesh, 100_000, np.random.default_rng(0))
    return {
        "out_dir": out_dir,
        "model": model,
        "mesh": mesh,
        "acc": acc,
        "comp": comp,
        "log": log,
        "train_seconds": train_seconds,
    }


@pytest.fixture(scope="session")
def full_run(sphere_dataset, sphere_gt_mesh, tmp_path_factory):
    out = tmp_path_factory.mktemp("full_run")
    return _run_pipeline(sphere_dataset, out, sphere_gt_mesh)


@pytest.fixture(scope="session")
def ablation_run(sphere_dataset, sphere_gt_mesh, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation_run")
    return _run_pipeline(
        sphere_dataset, out, sphere_gt_mesh, lambda3=0.0, lambda4=0.0
    )
