"""Multi-layer preference concept bottleneck head.

Configs and results are plain dicts with the same keys as the CLI's JSON.
"""

import json

from ._mvpcbm import Bundle, Error, Model, load_model, read_bundle, run_cli
from . import _mvpcbm as _core

__all__ = [
    "Bundle",
    "Error",
    "Model",
    "gradcheck",
    "load_model",
    "planted_layers",
    "read_bundle",
    "run_cli",
    "synthesize",
    "train",
]


def synthesize(config=None, **overrides):
    """Generates a synthetic bundle; keys as in the CLI `synth` config."""
    return _core._synthesize(json.dumps({**(config or {}), **overrides}))


def planted_layers(config=None, **overrides):
    return _core._planted_layers(json.dumps({**(config or {}), **overrides}))


def train(bundle, config=None, **overrides):
    """Returns (model, per-epoch report dicts)."""
    model, report = _core._train(bundle, json.dumps({**(config or {}), **overrides}))
    return model, [json.loads(line) for line in report]


def gradcheck(seed=0, inject_fault=False):
    return json.loads(_core._gradcheck(seed, inject_fault))


def _evaluate(self, bundle):
    return json.loads(self._evaluate(bundle))


def _explain(self, bundle, sample, topk=5):
    return json.loads(self._explain(bundle, sample, topk))


def _preference_profile(self, bundle):
    return json.loads(self._preference_profile(bundle))


def _to_dict(self):
    return json.loads(self._json())


Model.evaluate = _evaluate
Model.explain = _explain
Model.preference_profile = _preference_profile
Model.to_dict = _to_dict
