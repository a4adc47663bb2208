"""Deterministic synthetic multilingual multi-task corpus.

Utterances are sequences of per-language symbols rendered as repeated
embedding vectors plus Gaussian noise. Translation targets apply a
per-language-pair bijection followed by an adjacent-pair swap, which gives a
locally non-monotonic mapping that a purely frame-local head cannot learn.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

ASR_ONLY = "asr-only"
TASK_DEPENDENT = "task-dependent"

_MAGIC = b"OCTC"
_VERSION = 1


class CorpusFormatError(ValueError):
    """Malformed corpus file; the message names the failing byte offset."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense id layout: blank, per-language symbols, then special tokens."""

    num_languages: int
    symbols_per_language: int

    @property
    def blank(self) -> int:
        return 0

    @property
    def size(self) -> int:
        k = self.num_languages
        return 1 + k * self.symbols_per_language + 2 * k + 3

    def symbol_range(self, lang: int) -> range:
        self._check_lang(lang)
        start = 1 + lang * self.symbols_per_language
        return range(start, start + self.symbols_per_language)

    def lang_token(self, lang: int) -> int:
        self._check_lang(lang)
        return 1 + self.num_languages * self.symbols_per_language + lang

    @property
    def nolang(self) -> int:
        return 1 + self.num_languages * self.symbols_per_language + self.num_languages

    @property
    def asr(self) -> int:
        return self.nolang + 1

    def st_token(self, target_lang: int) -> int:
        self._check_lang(target_lang)
        return self.asr + 1 + target_lang

    @property
    def na(self) -> int:
        return self.asr + 1 + self.num_languages

    def is_symbol(self, token: int) -> bool:
        return 1 <= token <= self.num_languages * self.symbols_per_language

    def is_special(self, token: int) -> bool:
        return token > self.num_languages * self.symbols_per_language

    def is_lang_token(self, token: int) -> bool:
        base = 1 + self.num_languages * self.symbols_per_language
        return base <= token < base + self.num_languages

    def is_task_token(self, token: int) -> bool:
        return token == self.asr or self.asr < token < self.asr + 1 + self.num_languages

    def language_of_lang_token(self, token: int) -> int:
        if not self.is_lang_token(token):
            raise ValueError(f"{token} is not a language token")
        return token - (1 + self.num_languages * self.symbols_per_language)

    def language_of_symbol(self, token: int) -> int:
        if not self.is_symbol(token):
            raise ValueError(f"{token} is not a text symbol")
        return (token - 1) // self.symbols_per_language

    def target_of_st_token(self, token: int) -> int:
        if not (self.asr < token < self.asr + 1 + self.num_languages):
            raise ValueError(f"{token} is not an st token")
        return token - self.asr - 1

    def _check_lang(self, lang: int) -> None:
        if not 0 <= lang < self.num_languages:
            raise ValueError(f"language index {lang} out of range")


@dataclass(frozen=True)
class CorpusSpec:
    num_languages: int = 3
    symbols_per_language: int = 12
    min_symbols: int = 3
    max_symbols: int = 8
    min_frames_per_symbol: int = 2
    max_frames_per_symbol: int = 4
    feat_dim: int = 16
    noise_std: float = 0.1
    downsample_factor: int = 2
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    seed: int = 0
    translation_seed: int = 1

    def validate(self) -> None:
        if self.num_languages < 2:
            raise ValueError("need at least two languages")
        if self.symbols_per_language < 1:
            raise ValueError("need at least one symbol per language")
        if self.min_frames_per_symbol < 2:
            raise ValueError("frames per symbol must be >= 2 for CTC feasibility")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ValueError("bad symbol-length range")
        if self.downsample_factor < 1:
            raise ValueError("downsample factor must be >= 1")


@dataclass
class UtteranceRecord:
    utt_id: int
    lang: int
    features: np.ndarray  # (T_raw, feat_dim) float32
    transcript: list[int]
    translations: dict[int, list[int]]  # target language -> symbol ids
    previous_transcript: list[int] | None = None


def build_vocabulary(spec: CorpusSpec) -> Vocabulary:
    spec.validate()
    return Vocabulary(spec.num_languages, spec.symbols_per_language)


def _translation_tables(spec: CorpusSpec) -> dict[tuple[int, int], np.ndarray]:
    """Per (source, target) bijections over symbol offsets."""
    rng = np.random.default_rng(spec.translation_seed)
    tables = {}
    for src in range(spec.num_languages):
        for tgt in range(spec.num_languages):
            if src == tgt:
                continue
            tables[(src, tgt)] = rng.permutation(spec.symbols_per_language)
    return tables


def _swap_adjacent_pairs(tokens: Sequence[int]) -> list[int]:
    out = list(tokens)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def translate(
    transcript: Sequence[int],
    src: int,
    tgt: int,
    vocab: Vocabulary,
    tables: dict[tuple[int, int], np.ndarray],
) -> list[int]:
    """Bijection into the target language followed by adjacent-pair swap."""
    table = tables[(src, tgt)]
    src_start = vocab.symbol_range(src).start
    tgt_start = vocab.symbol_range(tgt).start
    mapped = [tgt_start + int(table[t - src_start]) for t in transcript]
    return _swap_adjacent_pairs(mapped)


def synthesize_split(spec: CorpusSpec, split_index: int, size: int) -> list[UtteranceRecord]:
    """Generate one corpus split; fully determined by (spec, split_index)."""
    spec.validate()
    vocab = build_vocabulary(spec)
    tables = _translation_tables(spec)
    rng = np.random.default_rng([spec.seed, split_index])
    emb_rng = np.random.default_rng([spec.seed, 9999])
    symbol_emb = emb_rng.normal(
        size=(spec.num_languages * spec.symbols_per_language, spec.feat_dim)
    )

    records: list[UtteranceRecord] = []
    prev: list[int] | None = None
    remaining_in_recording = 0
    for utt_id in range(size):
        if remaining_in_recording == 0:
            remaining_in_recording = int(rng.integers(1, 5))
            prev = None
        lang = int(rng.integers(spec.num_languages))
        length = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
        sym_range = vocab.symbol_range(lang)
        transcript: list[int] = []
        for _ in range(length):
            s = int(rng.integers(sym_range.start, sym_range.stop))
            while transcript and s == transcript[-1]:
                s = int(rng.integers(sym_range.start, sym_range.stop))
            transcript.append(s)
        translations = {
            tgt: translate(transcript, lang, tgt, vocab, tables)
            for tgt in range(spec.num_languages)
            if tgt != lang
        }

        fps = rng.integers(
            spec.min_frames_per_symbol, spec.max_frames_per_symbol + 1, size=length
        )
        # every reference (ASR and all ST) must stay CTC-feasible after the
        # configured downsampling; stretch the last symbol if needed
        worst = max(
            [len(transcript)] + [_min_frames(t) for t in translations.values()]
        )
        need_raw = spec.downsample_factor * (worst - 1) + 1
        deficit = need_raw - int(fps.sum())
        if deficit > 0:
            fps[-1] += deficit

        rows = np.repeat(symbol_emb[[t - 1 for t in transcript]], fps, axis=0)
        noise = rng.normal(scale=spec.noise_std, size=rows.shape)
        features = (rows + noise).astype(np.float32)

        records.append(
            UtteranceRecord(
                utt_id=utt_id,
                lang=lang,
                features=features,
                transcript=transcript,
                translations=translations,
                previous_transcript=list(prev) if prev is not None else None,
            )
        )
        prev = transcript
        remaining_in_recording -= 1
    return records


def _min_frames(target: Sequence[int]) -> int:
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def build_augmented_reference(
    utt: UtteranceRecord, task: int, layer_role: str, vocab: Vocabulary
) -> list[int]:
    """[true lang token, task token] ++ task text for one CTC layer.

    ASR-only layers always carry the transcript; task-dependent layers follow
    the task token. The echoed task token is the input task token for every
    layer (see all-layer consistency note in the repo docs).
    """
    if layer_role not in (ASR_ONLY, TASK_DEPENDENT):
        raise ValueError(f"unknown layer role {layer_role!r}")
    head = [vocab.lang_token(utt.lang), task]
    if task == vocab.asr or layer_role == ASR_ONLY:
        return head + list(utt.transcript)
    tgt = vocab.target_of_st_token(task)
    if tgt not in utt.translations:
        raise ValueError(f"utterance {utt.utt_id} has no translation into language {tgt}")
    return head + list(utt.translations[tgt])


def sample_conditioning(
    utt: UtteranceRecord, task: int, vocab: Vocabulary, rng: np.random.Generator
) -> tuple[int, list[int]]:
    """Training-time input conditioning: (language token or nolang, prompt).

    The true language is replaced by the unknown-language token with
    probability 0.5; the prompt is the previous sentence with probability 0.5
    when one exists, else the no-prompt token.
    """
    lang_input = vocab.lang_token(utt.lang) if rng.random() < 0.5 else vocab.nolang
    if utt.previous_transcript and rng.random() < 0.5:
        prompt = list(utt.previous_transcript)
    else:
        prompt = [vocab.na]
    return lang_input, prompt


# ---------------------------------------------------------------------------
# corpus files: magic "OCTC", version, JSON header, length-prefixed records
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, fh: BinaryIO):
        self._fh = fh
        self.offset = 0

    def read(self, n: int) -> bytes:
        buf = self._fh.read(n)
        if len(buf) != n:
            raise CorpusFormatError(
                f"truncated corpus file: wanted {n} bytes at byte offset {self.offset}"
            )
        self.offset += n
        return buf

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _write_ids(out: io.BytesIO, ids: Sequence[int]) -> None:
    out.write(struct.pack("<H", len(ids)))
    out.write(struct.pack(f"<{len(ids)}H", *ids))


def _read_ids(r: _Reader) -> list[int]:
    (n,) = r.unpack("<H")
    return list(r.unpack(f"<{n}H")) if n else []


def write_corpus(path: str | Path, spec: CorpusSpec, records: Iterable[UtteranceRecord]) -> None:
    records = list(records)
    header = json.dumps(
        {
            "spec": asdict(spec),
            "vocabulary": {
                "num_languages": spec.num_languages,
                "symbols_per_language": spec.symbols_per_language,
                "size": build_vocabulary(spec).size,
            },
        },
        sort_keys=True,
    ).encode()
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<B", _VERSION))
    out.write(struct.pack("<I", len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(records)))
    for rec in records:
        t_raw, d_feat = rec.features.shape
        out.write(struct.pack("<IBIH", rec.utt_id, rec.lang, t_raw, d_feat))
        out.write(np.ascontiguousarray(rec.features, dtype="<f4").tobytes())
        _write_ids(out, rec.transcript)
        out.write(struct.pack("<B", len(rec.translations)))
        for tgt in sorted(rec.translations):
            out.write(struct.pack("<B", tgt))
            _write_ids(out, rec.translations[tgt])
        if rec.previous_transcript is None:
            out.write(struct.pack("<B", 0))
        else:
            out.write(struct.pack("<B", 1))
            _write_ids(out, rec.previous_transcript)
    Path(path).write_bytes(out.getvalue())


def read_corpus(path: str | Path) -> tuple[CorpusSpec, list[UtteranceRecord]]:
    with open(path, "rb") as fh:
        r = _Reader(fh)
        if r.read(4) != _MAGIC:
            raise CorpusFormatError("bad magic bytes at byte offset 0")
        (version,) = r.unpack("<B")
        if version != _VERSION:
            raise CorpusFormatError(f"unsupported corpus version {version} at byte offset 4")
        (hlen,) = r.unpack("<I")
        header = json.loads(r.read(hlen).decode())
        spec = CorpusSpec(**header["spec"])
        (count,) = r.unpack("<I")
        records = []
        for _ in range(count):
            utt_id, lang, t_raw, d_feat = r.unpack("<IBIH")
            feats = np.frombuffer(r.read(4 * t_raw * d_feat), dtype="<f4")
            features = feats.reshape(t_raw, d_feat).copy()
            transcript = _read_ids(r)
            (n_trans,) = r.unpack("<B")
            translations = {}
            for _ in range(n_trans):
                (tgt,) = r.unpack("<B")
                translations[tgt] = _read_ids(r)
            (has_prev,) = r.unpack("<B")
            prev = _read_ids(r) if has_prev else None
            records.append(
                UtteranceRecord(utt_id, lang, features, transcript, translations, prev)
            )
    return spec, records


def generate_corpus(spec: CorpusSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write train/dev/test splits under ``out_dir``; byte-deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {"train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size}
    paths = {}
    for i, (split, size) in enumerate(sizes.items()):
        records = synthesize_split(spec, i, size)
        path = out_dir / f"{split}.octc"
        write_corpus(path, spec, records)
        paths[split] = path
    return paths
