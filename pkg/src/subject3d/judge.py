"""Pairwise vision-judge comparisons of two rendered assets.

Renders of each asset are tiled into one square grid image (2x2 for the
4-view layout, 3x3 for 9-view); both grids go to a judge client together
with an instruction, and the structured reply (winner plus three
criterion scores) is validated into a PairwiseJudgment. Transport
failures retry with exponential backoff; unparseable replies raise with
the raw payload preserved.

The shipped stub client is deterministic per seed and needs no network;
the HTTP client reads its endpoint and credentials from the environment.
Requests are serialized through a single client by default.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass

import torch

from .errors import ConfigError, JudgeResponseError, JudgeTransportError
from .images import ImageBatch, to_uint8

CRITERIA = ("text_asset_alignment", "3d_plausibility", "texture_details")

LAYOUTS = {"4-view": 2, "9-view": 3}

INSTRUCTION_TEMPLATE_VERSION = 1
INSTRUCTION_TEMPLATE = (
    "You are comparing two 3D assets, each shown as a grid of renders "
    "(left grid: asset A, right grid: asset B). Task: {task}. "
    "Judge them on text-asset alignment, 3D plausibility, and texture details. "
    "Reply as JSON: {{\"winner\": \"A\"|\"B\"|\"tie\", \"criteria\": "
    "{{\"text_asset_alignment\": {{\"A\": s, \"B\": s}}, \"3d_plausibility\": "
    "{{\"A\": s, \"B\": s}}, \"texture_details\": {{\"A\": s, \"B\": s}}}}, "
    "\"rationale\": \"...\"}} with scores s in [0, 10]."
)


def judge_instruction(task: str) -> str:
    return INSTRUCTION_TEMPLATE.format(task=task)


@dataclass(frozen=True)
class PairwiseJudgment:
    """Validated judge verdict.

    ``criteria`` maps each criterion to {"A": score, "B": score}. A
    non-tie winner must agree with the majority of per-criterion
    comparisons.
    """

    winner: str
    criteria: dict
    raw_response: str

    def __post_init__(self):
        if self.winner not in ("A", "B", "tie"):
            raise JudgeResponseError(f"invalid winner {self.winner!r}", raw=self.raw_response)
        if set(self.criteria) != set(CRITERIA):
            raise JudgeResponseError(
                f"criteria keys {sorted(self.criteria)} != expected {sorted(CRITERIA)}",
                raw=self.raw_response,
            )
        if self.winner != "tie":
            wins = sum(
                1 for c in CRITERIA if self.criteria[c][self.winner] > self.criteria[c][_other(self.winner)]
            )
            losses = sum(
                1 for c in CRITERIA if self.criteria[c][self.winner] < self.criteria[c][_other(self.winner)]
            )
            if wins <= losses:
                raise JudgeResponseError(
                    f"winner {self.winner} inconsistent with criteria majority",
                    raw=self.raw_response,
                )


def _other(side: str) -> str:
    return "B" if side == "A" else "A"


# -- grid building ------------------------------------------------------------------------


def build_grid(renders, layout: str) -> torch.Tensor:
    """Tile the first k*k renders into one square image of equal tiles."""
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    k = LAYOUTS[layout]
    frames = renders.data if isinstance(renders, ImageBatch) else renders
    if frames.shape[0] < k * k:
        raise ConfigError(f"layout {layout} needs {k * k} renders, got {frames.shape[0]}")
    tile = frames.shape[-1]
    grid = torch.ones(3, k * tile, k * tile, dtype=frames.dtype)
    for idx in range(k * k):
        r, c = divmod(idx, k)
        grid[:, r * tile : (r + 1) * tile, c * tile : (c + 1) * tile] = frames[idx]
    return grid


def encode_image_b64(img: torch.Tensor) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# -- clients -----------------------------------------------------------------------------


class StubJudgeClient:
    """Deterministic offline judge.

    With ``prefer`` set, that side always wins with consistent criteria;
    otherwise the verdict is derived from a hash of (seed, payload).
    ``malformed`` makes it return garbage, for the parse-error path.
    """

    def __init__(self, seed: int = 0, prefer: str | None = None, malformed: bool = False):
        self.seed = seed
        self.prefer = prefer
        self.malformed = malformed

    def send(self, payload: dict) -> dict:
        if self.malformed:
            return {"verdict": "the first one looked nicer"}
        if self.prefer in ("A", "B"):
            winner = self.prefer
        else:
            digest = hashlib.blake2b(
                json.dumps([self.seed, payload.get("images", []), payload.get("instruction", "")]).encode(),
                digest_size=4,
            ).digest()
            winner = ["A", "B", "tie"][digest[0] % 3]
        hi, lo = (8.0, 5.0)
        criteria = {}
        for crit in CRITERIA:
            if winner == "tie":
                criteria[crit] = {"A": 6.0, "B": 6.0}
            else:
                a_better = winner == "A"
                criteria[crit] = {"A": hi if a_better else lo, "B": lo if a_better else hi}
        return {"winner": winner, "criteria": criteria, "rationale": "stub verdict"}


class HttpJudgeClient:
    """JSON-over-HTTP transport to a real judge endpoint.

    Endpoint and credential come from ``JUDGE_ENDPOINT`` and
    ``JUDGE_API_KEY`` unless passed explicitly.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get("JUDGE_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("JUDGE_API_KEY", "")
        self.timeout = timeout
        if not self.endpoint:
            raise ConfigError("judge endpoint not configured (set JUDGE_ENDPOINT)")

    def send(self, payload: dict) -> dict:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise JudgeTransportError(f"judge request failed: {exc}") from exc
        if resp.status_code != 200:
            raise JudgeTransportError(f"judge endpoint returned {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise JudgeResponseError("judge reply is not JSON", raw=resp.text) from exc


# -- comparison ---------------------------------------------------------------------------


def parse_judgment(response: dict) -> PairwiseJudgment:
    raw = json.dumps(response)
    try:
        winner = response["winner"]
        criteria = {
            crit: {"A": float(response["criteria"][crit]["A"]), "B": float(response["criteria"][crit]["B"])}
            for crit in CRITERIA
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise JudgeResponseError(f"malformed judge reply: {exc}", raw=raw) from exc
    return PairwiseJudgment(winner=winner, criteria=criteria, raw_response=raw)


def vision_judge_compare(
    renders_a,
    renders_b,
    instruction: str,
    layout: str,
    client,
    max_attempts: int = 3,
    backoff_base: float = 0.5,
    sleep=time.sleep,
) -> PairwiseJudgment:
    """Grid both render sets, query the judge, and parse its verdict.

    Transport errors retry up to ``max_attempts`` with exponential
    backoff (the final failure propagates); malformed replies raise
    JudgeResponseError carrying the raw payload.
    """
    grid_a = build_grid(renders_a, layout)
    grid_b = build_grid(renders_b, layout)
    payload = {
        "images": [encode_image_b64(grid_a), encode_image_b64(grid_b)],
        "instruction": instruction,
    }
    attempt = 0
    while True:
        try:
            response = client.send(payload)
            break
        except JudgeTransportError:
            attempt += 1
            if attempt >= max_attempts:
                raise
            sleep(backoff_base * (2 ** (attempt - 1)))
    return parse_judgment(response)
