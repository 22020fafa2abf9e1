"""CC-client: per-app inference on the most recent shipped model."""

from __future__ import annotations

import numpy as np

from ..featurize import FeatureScales
from ..sac import denormalize_action
from ..tinynn import compile_inference, deserialize, run_compiled


class CCClient:
    """Keeps one compiled model per app and turns states into cwnd values."""

    def __init__(self, scales: FeatureScales | None = None, cwnd_max: int | None = None):
        self.scales = scales or FeatureScales()
        self.models: dict[int, list] = {}
        self.versions: dict[int, int] = {}
        self.cwnd_max = cwnd_max
        self.installs = 0

    def install(self, app_id: int, snapshot: bytes, version: int = 0) -> None:
        net = deserialize(snapshot, (1, 12))
        self.models[app_id] = compile_inference(net)
        self.versions[app_id] = version
        self.installs += 1

    def has_model(self, app_id: int) -> bool:
        return app_id in self.models

    def action(self, app_id: int, state_values) -> float:
        x = self.scales.transform(np.asarray(state_values, dtype=np.float32)[None, :])
        return float(np.tanh(run_compiled(self.models[app_id], x)[0, 0]))

    def cwnd(self, app_id: int, state_values) -> float:
        a = self.action(app_id, state_values)
        if self.cwnd_max is None:
            return float(denormalize_action(a))
        return float(denormalize_action(a, cwnd_max=self.cwnd_max))
