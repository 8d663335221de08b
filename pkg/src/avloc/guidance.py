"""Caption guidance: prompt rendering, MLLM clients, response parsing, caching,
and conversion of captions into reference embeddings."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import AVClip, fixture_captions
from .encoders import ReferenceEmbeddings
from .errors import AVLocError, CountMismatchError, ParseError, ValidationError

log = logging.getLogger(__name__)

CAPTION_PREFIX = "an image of"
DEFAULT_RETRIES = 3
ENDPOINT_ENV = "AVLOC_MLLM_ENDPOINT"
TOKEN_ENV = "AVLOC_MLLM_TOKEN"

PROMPT_TEMPLATE = """\
Analyze the provided image along with its associated class label, which identifies an object or element in the image that emits sound. The scene is complex, containing multiple objects, and requiring categorization based on the examples below.

Instructions:
1. Identify foreground (sound-related) elements: These are objects in the image emitting sounds that match the class description.
2. Identify background (sound-unrelated) elements: These are distinct objects visible in the image but unrelated to the sound described by the class.
3. Focus strictly on what is visible in the image. Do not infer or describe unseen objects.

Output Format:
The response must always be in JSON format with structured sentences that start with 'an image of....'. If there are two or more class labels (separated by commas), the foreground must be provided as a list of sound-making elements.

Examples:
(1) Scenario with multiple objects, including a sound-making one
Input:
- image: example_image_1
- class label: man_blowing_whistle
Output:
{
    "foreground": "an image of a man blowing a whistle",
    "background": "an image of mountains, desert landscape, and sky"
}

(2) Scenario with visually similar objects, distinguishing sound-making ones
Input:
- image: example_image_2
- class label: acoustic_guitar
Output:
{
    "foreground": "an image of a man playing guitar",
    "background": "an image of non-playing guitars, drum-set, and amp"
}

(3) Scenario with multiple sound-making elements
Input:
- image: example_image_3
- class label: clarinet, violin
Output:
{
    "foreground": ["an image of playing clarinet", "an image of playing violin"],
    "background": "an image of the kitchen, curtains, and piano in the background"
}
Now, process the provided input following the same structure and RETURN ONLY the JSON FORMAT.

Input:
- image: <provided image>
- class label: {labels}
"""

TEMPLATE_ID = "fg-bg-3scenario"
PROMPT_VERSION = f"{TEMPLATE_ID}-{hashlib.sha256(PROMPT_TEMPLATE.encode()).hexdigest()[:12]}"


@dataclass(frozen=True)
class PromptSpec:
    class_labels: tuple
    template_id: str = TEMPLATE_ID

    def render(self):
        return build_prompt(list(self.class_labels))


def build_prompt(labels):
    """Render the few-shot caption prompt for one clip's class labels."""
    labels = [str(x).strip() for x in labels]
    if not labels or not all(labels):
        raise ValidationError("need at least one non-empty class label")
    return PROMPT_TEMPLATE.replace("{labels}", ", ".join(labels))


@dataclass
class GuidanceCaptions:
    clip_id: str
    class_labels: list
    foreground: list
    background: str
    source: str = "mllm"
    prompt_version: str = PROMPT_VERSION
    model: str = "unknown"

    def __post_init__(self):
        if not self.foreground:
            raise ValidationError("need at least one foreground caption")
        for cap in [*self.foreground, self.background]:
            if not cap or not cap.startswith(CAPTION_PREFIX):
                raise ValidationError(f"caption must start with '{CAPTION_PREFIX}': {cap!r}")

    @property
    def K(self):
        return len(self.foreground)

    def to_record(self, timestamp=None):
        rec = {k: v for k, v in asdict(self).items() if k != "source"}
        rec["timestamp"] = time.time() if timestamp is None else timestamp
        return rec

    @classmethod
    def from_record(cls, rec, source="cache"):
        return cls(rec["clip_id"], list(rec["class_labels"]), list(rec["foreground"]),
                   rec["background"], source, rec["prompt_version"], rec["model"])


_FENCE = re.compile(r"```(?:json)?", re.IGNORECASE)


def normalize_caption(text):
    text = " ".join(str(text).split())
    if not text:
        raise ParseError("empty caption")
    if text.lower().startswith(CAPTION_PREFIX):
        return CAPTION_PREFIX + text[len(CAPTION_PREFIX):]
    return f"{CAPTION_PREFIX} {text}"


def parse_response(raw, expected_K, clip_id="", class_labels=(), model="unknown", source="mllm"):
    """Extract captions from an MLLM reply.

    Takes the first JSON object in ``raw`` (code fences tolerated). A string
    ``foreground`` becomes a one-element list. Raises ``ParseError`` for
    malformed or incomplete JSON and ``CountMismatchError`` when the number
    of foreground captions differs from ``expected_K``.
    """
    text = _FENCE.sub("", raw or "")
    start = text.find("{")
    if start < 0:
        raise ParseError(f"no JSON object in response: {raw[:80]!r}")
    try:
        obj, _ = json.JSONDecoder().raw_decode(text[start:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg}): {text[start:start + 80]!r}") from exc
    if not isinstance(obj, dict):
        raise ParseError("response JSON is not an object")
    if "foreground" not in obj:
        raise ParseError("response lacks 'foreground'")
    if "background" not in obj:
        raise ParseError("response lacks 'background'")
    fg = obj["foreground"]
    if isinstance(fg, str):
        fg = [fg]
    if not isinstance(fg, list) or not all(isinstance(x, str) for x in fg):
        raise ParseError("'foreground' must be a string or a list of strings")
    if not isinstance(obj["background"], str):
        raise ParseError("'background' must be a string")
    fg = [normalize_caption(x) for x in fg]
    if len(fg) != expected_K:
        raise CountMismatchError(f"{clip_id}: expected {expected_K} foreground captions, got {len(fg)}",
                                 len(fg), expected_K)
    return GuidanceCaptions(clip_id, list(class_labels), fg, normalize_caption(obj["background"]),
                            source, PROMPT_VERSION, model)


def render_response(captions: GuidanceCaptions):
    """Inverse of :func:`parse_response` for a valid caption set."""
    fg = captions.foreground[0] if captions.K == 1 else captions.foreground
    return json.dumps({"foreground": fg, "background": captions.background})


# --- clients -------------------------------------------------------------------

class ClientError(AVLocError):
    pass


class FixtureClient:
    """Offline client: answers from a synthetic clip's ground truth."""

    model = "fixture"

    def __init__(self):
        self.calls = 0

    def generate(self, clip: AVClip, prompt: str) -> str:
        self.calls += 1
        fg, bg = fixture_captions(clip)
        return json.dumps({"foreground": fg[0] if len(fg) == 1 else fg, "background": bg})


class HTTPClient:
    """POSTs ``{"image": <base64 PNG>, "prompt": ...}`` and reads ``{"text": ...}``."""

    def __init__(self, endpoint=None, model="mllm", timeout=60.0, token=None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ValidationError(f"no MLLM endpoint configured (set {ENDPOINT_ENV})")
        self.model = model
        self.timeout = timeout
        self.token = token or os.environ.get(TOKEN_ENV)
        self.calls = 0

    @staticmethod
    def encode_image(image):
        from PIL import Image

        arr = np.round(np.transpose(np.asarray(image), (1, 2, 0)) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode("ascii")

    def generate(self, clip: AVClip, prompt: str) -> str:
        self.calls += 1
        body = json.dumps({"image": self.encode_image(clip.image), "prompt": prompt}).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise ClientError(f"MLLM request failed: {exc}") from exc
        if "text" not in payload:
            raise ClientError("MLLM response lacks 'text'")
        return payload["text"]


# --- cache ---------------------------------------------------------------------

class CaptionCache:
    """Append-only JSON-lines store, indexed in memory by (clip_id, prompt_version, model)."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple, dict] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._index[self._key(rec["clip_id"], rec["prompt_version"], rec["model"])] = rec

    @staticmethod
    def _key(clip_id, prompt_version, model):
        return clip_id, prompt_version, model

    def __len__(self):
        return len(self._index)

    def get(self, clip_id, model, prompt_version=PROMPT_VERSION):
        rec = self._index.get(self._key(clip_id, prompt_version, model))
        return GuidanceCaptions.from_record(rec) if rec is not None else None

    def put(self, captions: GuidanceCaptions):
        key = self._key(captions.clip_id, captions.prompt_version, captions.model)
        with self._lock:
            if key in self._index:
                return False
            rec = captions.to_record()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
            self._index[key] = rec
            return True


class CaptionFailure(AVLocError):
    def __init__(self, clip_id, reason):
        super().__init__(f"{clip_id}: {reason}")
        self.clip_id = clip_id
        self.reason = reason


def get_or_generate(clip: AVClip, client, cache: CaptionCache, retries=DEFAULT_RETRIES):
    """Cached captions for ``clip``, asking ``client`` on a miss.

    A wrong caption count is retried up to ``retries`` attempts in total;
    malformed output and exhausted retries raise ``CaptionFailure``.
    """
    model = getattr(client, "model", "unknown")
    hit = cache.get(clip.clip_id, model)
    if hit is not None:
        return hit
    prompt = build_prompt(clip.class_labels)
    source = "fixture" if isinstance(client, FixtureClient) else "mllm"
    last = None
    for attempt in range(retries):
        try:
            raw = client.generate(clip, prompt)
            caps = parse_response(raw, clip.K, clip.clip_id, clip.class_labels, model, source)
        except (CountMismatchError, ClientError) as exc:
            last = exc
            log.info("caption attempt %d for %s failed: %s", attempt + 1, clip.clip_id, exc)
            continue
        except ParseError as exc:
            raise CaptionFailure(clip.clip_id, str(exc)) from exc
        cache.put(caps)
        return caps
    raise CaptionFailure(clip.clip_id, f"gave up after {retries} attempts: {last}")


def to_reference_embeddings(captions, text_encoder, dtype=torch.float32):
    """Encode a batch of caption sets into ``ReferenceEmbeddings``.

    ``text_encoder`` maps a list of strings to unit rows ``(n, c)``. Batches
    with uneven ``K`` are padded by repeating each clip's last caption.
    """
    captions = list(captions)
    K = max(c.K for c in captions)
    if any(c.K != K for c in captions):
        warnings.warn("ragged caption counts in batch; repeating last caption", RuntimeWarning)
    fg_text, bg_text = [], []
    for c in captions:
        fg_text += c.foreground + [c.foreground[-1]] * (K - c.K)
        bg_text.append(c.background)
    vecs = torch.as_tensor(text_encoder(fg_text + bg_text), dtype=dtype)
    vecs = torch.nn.functional.normalize(vecs, dim=-1)
    B = len(captions)
    fg = vecs[: B * K].reshape(B, K, -1)
    bg = vecs[B * K:]
    return ReferenceEmbeddings(fg, bg)


__all__ = [
    "CAPTION_PREFIX", "CaptionCache", "CaptionFailure", "ClientError", "FixtureClient",
    "GuidanceCaptions", "HTTPClient", "PROMPT_TEMPLATE", "PROMPT_VERSION", "PromptSpec",
    "build_prompt", "get_or_generate", "normalize_caption", "parse_response",
    "render_response", "to_reference_embeddings",
]
