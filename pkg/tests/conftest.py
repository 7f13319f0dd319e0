"""Shared fixtures: the toy world and a fully trained detector.

Training the default detector takes ~40 s, so the result is cached on disk
under ``.cache/`` keyed by a hash of everything that determines it; any
config change invalidates the cache automatically.
"""

import dataclasses
import hashlib
import json
import pathlib

import numpy as np
import pytest

from fusedet import model as md
from fusedet import scenegen, training
from fusedet.detector import Detector

CACHE_DIR = pathlib.Path(__file__).resolve().parent.parent / ".cache"

TRAIN_SEED_BASE = 1000
HELD_OUT_SEED_BASE = 9000
N_TRAIN = 60
N_HELD_OUT = 40


def cache_key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _scene_digest(scenes) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.scene_id.encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(np.ascontiguousarray(s.bev).tobytes())
    return h.hexdigest()[:16]


def cached_training_run(tag: str, scenes, det_config: md.DetectorConfig,
                        train_config: training.TrainConfig,
                        augment=None, adversary=None, loss_builder=None,
                        extra_key=()) -> Detector:
    """Train (or reload) a detector deterministically derived from its inputs.

    ``augment``/``adversary``/``loss_builder`` are part of the training
    definition but not hashable; callers pass ``extra_key`` to distinguish
    such runs.
    """
    key = cache_key(tag, det_config.to_dict(),
                    dataclasses.asdict(train_config),
                    _scene_digest(scenes), list(extra_key))
    path = CACHE_DIR / f"{tag}-{key}.ckpt"
    if path.exists():
        params, config, _ = md.load_checkpoint(path)
        return Detector(params, config)
    params, _ = training.train_detector(scenes, det_config, train_config,
                                        augment=augment, adversary=adversary,
                                        loss_builder=loss_builder)
    CACHE_DIR.mkdir(exist_ok=True)
    md.save_checkpoint(path, params, det_config, {"tag": tag})
    return Detector(params, det_config)


@pytest.fixture(scope="session")
def scene_spec():
    return scenegen.SceneSpec()


@pytest.fixture(scope="session")
def train_scenes(scene_spec):
    return scenegen.generate_dataset(scene_spec, N_TRAIN, TRAIN_SEED_BASE,
                                     n_objects_range=(1, 3))


@pytest.fixture(scope="session")
def held_out_scenes(scene_spec):
    return scenegen.generate_dataset(scene_spec, N_HELD_OUT,
                                     HELD_OUT_SEED_BASE,
                                     n_objects_range=(1, 3))


@pytest.fixture(scope="session")
def trained_detector(train_scenes) -> Detector:
    """The default-config detector all attack/defense tests run against."""
    return cached_training_run("baseline", train_scenes, md.DetectorConfig(),
                               training.TrainConfig())


@pytest.fixture(scope="session")
def untrained_detector() -> Detector:
    config = md.DetectorConfig()
    return Detector(md.init_params(config, seed=7), config)


@pytest.fixture()
def rng():
    return np.random.default_rng(123)
