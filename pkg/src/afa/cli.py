"""``afa`` command-line entry point.

Exit codes: 0 ok, 1 IO, 2 state conflict, 3 backend, 4 data.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backends import DEFAULT_API_KEY_ENV, build_backend
from .engine import SHARED_USER, DialogueEngine, EngineConfig
from .errors import (
    AfaError,
    BackendUnavailable,
    CorruptStore,
    DimMismatch,
    DuplicateEnrollment,
    EmbedUnavailable,
    IngestAborted,
    InsufficientData,
    ScriptMiss,
)
from .fixture import generate_records
from .harness import (
    EvalReport,
    PatRecord,
    VoiceSetup,
    ingest_pat,
    parse_report_text,
    render_report,
    run_protocol,
)
from .persona import PersonaProfile, ProfileStore
from .profile_store import MemoryStore
from .retrieval import CachedEmbedder, Condition, HashingEmbedder, RemoteEmbedder, TextEmbedder
from .speaker_id import SpeakerRegistry, run_speaker_validation

logger = logging.getLogger("afa")

EXIT_OK, EXIT_IO, EXIT_STATE, EXIT_BACKEND, EXIT_DATA = 0, 1, 2, 3, 4

DEFAULTS: dict = {
    "engine": {**EngineConfig().to_dict(), "routing_enabled": None},
    "backend": {"kind": "echo", "api_key_env": DEFAULT_API_KEY_ENV},
    "embedder": {"kind": "hashing", "dim": 256},
    "speaker": {"threshold": 0.70},
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _deep_merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: Mapping | None = None) -> dict:
    """Built-in defaults, then the config file, then command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"malformed config {path}: {exc}", EXIT_DATA) from exc
        cfg = _deep_merge(cfg, file_cfg)
    return _deep_merge(cfg, overrides or {})


def redacted(cfg: Mapping) -> dict:
    """Config with anything that looks like a secret value replaced."""
    out = {}
    for k, v in cfg.items():
        if isinstance(v, Mapping):
            out[k] = redacted(v)
        elif any(s in k.lower() for s in ("key", "token", "secret", "password")) and not k.endswith("_env"):
            out[k] = "***"
        else:
            out[k] = v
    return out


def build_embedder(cfg: Mapping) -> TextEmbedder:
    kind = cfg.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(int(cfg.get("dim", 256)))
    if kind == "remote":
        key = os.environ.get(cfg.get("api_key_env", DEFAULT_API_KEY_ENV))
        return CachedEmbedder(RemoteEmbedder(cfg["url"], cfg.get("model", ""), cfg.get("dim"), key))
    raise CliError(f"unknown embedder kind {kind!r}", EXIT_DATA)


def _read_vectors(path: str) -> list[list[float]]:
    """A JSON array of vectors (or one vector), or JSONL of vectors / ``{"embedding": [...]}``."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_IO) from exc
    try:
        data = json.loads(raw)
        items = data if data and isinstance(data[0], list) else [data]
    except (json.JSONDecodeError, TypeError, KeyError, IndexError):
        items = []
        for lineno, line in enumerate(raw.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: not JSON", EXIT_DATA) from exc
            items.append(obj["embedding"] if isinstance(obj, dict) else obj)
    try:
        return [[float(x) for x in v] for v in items]
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: vectors must be lists of numbers", EXIT_DATA) from exc


class State:
    """On-disk engine state: registry.json, memory/, profiles/."""

    def __init__(self, root: str | Path, window_size: int):
        self.root = Path(root)
        self.registry_path = self.root / "registry.json"
        self.memory = MemoryStore(self.root / "memory", window_size)
        self.profiles = ProfileStore(self.root / "profiles")

    def load_registry(self) -> SpeakerRegistry:
        return SpeakerRegistry.load(self.registry_path) if self.registry_path.exists() else SpeakerRegistry()

    def save_registry(self, registry: SpeakerRegistry) -> None:
        registry.save(self.registry_path)


# -- subcommands ------------------------------------------------------------------


def cmd_enroll(args, cfg, out) -> int:
    state = State(args.state_dir, cfg["engine"]["window_size"])
    registry = state.load_registry()
    vectors = _read_vectors(args.embeddings_file)
    try:
        enrollment = registry.enroll(args.user, vectors)
    except DuplicateEnrollment as exc:
        raise CliError(str(exc), EXIT_STATE) from exc
    except (DimMismatch, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if args.persona:
        try:
            text = Path(args.persona).read_text(encoding="utf-8").strip()
        except OSError as exc:
            raise CliError(f"cannot read {args.persona}: {exc.strerror}", EXIT_IO) from exc
        state.profiles.put(PersonaProfile(args.user, [], text or None))
    state.save_registry(registry)
    norm = float(np.linalg.norm(enrollment.centroid))
    print(f"enrolled {args.user} from {len(vectors)} embeddings; centroid norm {norm:.6f}", file=out)
    return EXIT_OK


def cmd_identify(args, cfg, out) -> int:
    state = State(args.state_dir, cfg["engine"]["window_size"])
    registry = state.load_registry()
    probe = _read_vectors(args.embedding_file)
    if len(probe) != 1:
        raise CliError("identify expects exactly one embedding", EXIT_DATA)
    threshold = cfg["speaker"]["threshold"]
    try:
        res = registry.identify(probe[0], threshold, register_new=args.register)
    except (DimMismatch, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if args.register:
        state.save_registry(registry)
    status = "new" if res.is_new else "matched"
    print(f"{status} {res.user_id or '-'} similarity {res.similarity:.6f} threshold {threshold:.2f}", file=out)
    return EXIT_OK


def cmd_chat(args, cfg, out) -> int:
    engine_cfg = EngineConfig.from_dict({**cfg["engine"], "speaker_threshold": cfg["speaker"]["threshold"]})
    state = State(args.state_dir, engine_cfg.window_size)
    backend = build_backend(cfg["backend"])
    engine = DialogueEngine(engine_cfg, backend, build_embedder(cfg["embedder"]), state.load_registry())

    voice = None
    if args.voice_embedding:
        vecs = _read_vectors(args.voice_embedding)
        if len(vecs) != 1:
            raise CliError("--voice-embedding expects exactly one vector", EXIT_DATA)
        voice = vecs[0]
    try:
        resolved, _ = engine.resolve(voice, args.user)
    except (DimMismatch, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    engine.memories[resolved] = state.memory.get(resolved)
    if engine_cfg.condition is not Condition.NO_PERSONA:
        engine.profiles[resolved] = state.profiles.get(resolved)

    try:
        res = engine.handle_turn(args.query, user_id=resolved if engine_cfg.routing_enabled else None)
    except (BackendUnavailable, ScriptMiss, EmbedUnavailable) as exc:
        raise CliError(str(exc), EXIT_BACKEND) from exc

    state.memory.put(engine.memories[resolved])
    if resolved in engine.profiles:
        state.profiles.put(engine.profiles[resolved])
    if engine_cfg.routing_enabled and voice is not None:
        state.save_registry(engine.registry)
    for w in res.warnings:
        logger.warning(w)
    label = "shared (unrouted)" if resolved == SHARED_USER and not engine_cfg.routing_enabled else resolved
    print(f"user: {label}", file=out)
    print(res.response, file=out)
    return EXIT_OK


def _ingest(path: str):
    try:
        return ingest_pat(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc.strerror}", EXIT_IO) from exc
    except IngestAborted as exc:
        raise CliError(str(exc), EXIT_DATA) from exc


def cmd_ingest(args, cfg, out) -> int:
    result = _ingest(args.dataset)
    if args.rejects:
        result.write_rejects(args.rejects)
    personas = len({r.persona_id for r in result.records})
    print(f"records {len(result.records)} personas {personas} rejects {len(result.rejects)}", file=out)
    for rej in result.rejects[:10]:
        print(f"  line {rej['line']}: {rej['error']}", file=out)
    return EXIT_OK


def cmd_eval(args, cfg, out) -> int:
    if args.dataset:
        ingested = _ingest(args.dataset)
        records = ingested.records
        source = str(args.dataset)
    else:
        records = [PatRecord.from_json(r) for r in generate_records()]
        source = "builtin-fixture"
    try:
        conditions = [Condition(c.strip()) for c in args.conditions.split(",") if c.strip()]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc

    engine_cfg = EngineConfig.from_dict({**cfg["engine"], "speaker_threshold": cfg["speaker"]["threshold"]})
    backend_kind = args.backend or "persona_injecting"
    backend = None if backend_kind == "persona_injecting" else build_backend({**cfg["backend"], "kind": backend_kind})
    voice = VoiceSetup(seed=args.seed) if args.voice else None
    try:
        result = run_protocol(
            records,
            build_embedder(cfg["embedder"]),
            n_pairs=args.pairs,
            turns_per_user=args.turns_per_user,
            seed=args.seed,
            conditions=conditions,
            cold_start=args.cold_start,
            engine_config=engine_cfg,
            backend=backend,
            voice=voice,
            extra_metadata={"dataset": source},
        )
    except InsufficientData as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    except EmbedUnavailable as exc:
        raise CliError(str(exc), EXIT_BACKEND) from exc

    if args.out:
        fmt = args.format or _format_for(args.out)
        try:
            Path(args.out).write_bytes(render_report(result.report, fmt))
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_IO) from exc
    out.write(render_report(result.report, "text").decode("utf-8"))
    for v in result.violations[:20]:
        logger.error("isolation violation: %s", v)
    return EXIT_OK


def _format_for(path: str) -> str:
    suffix = Path(path).suffix.lower()
    return {".csv": "csv", ".txt": "text"}.get(suffix, "json")


def cmd_validate_speakers(args, cfg, out) -> int:
    try:
        res = run_speaker_validation(
            args.speakers, args.enroll_n, args.test_n, args.noise, args.dim, args.seed, cfg["speaker"]["threshold"]
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    print(
        f"decisions {res.decisions} correct {res.correct} accuracy {res.accuracy:.6f} "
        f"mean_similarity {res.mean_similarity:.6f}",
        file=out,
    )
    return EXIT_OK


def cmd_report(args, cfg, out) -> int:
    try:
        raw = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc.strerror}", EXIT_IO) from exc
    try:
        if raw.lstrip().startswith("{"):
            report = EvalReport.from_dict(json.loads(raw))
        else:
            report = parse_report_text(raw)
    except (ValueError, KeyError, IndexError) as exc:
        raise CliError(f"malformed report {args.input}: {exc}", EXIT_DATA) from exc
    out.write(render_report(report, args.format).decode("utf-8"))
    return EXIT_OK


def cmd_config(args, cfg, out) -> int:
    print(json.dumps(redacted(cfg), indent=2, sort_keys=True), file=out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afa", description="Identity-aware multi-user assistant toolkit.")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--state-dir", default=".afa", help="engine state directory (default: .afa)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("enroll", help="enroll a speaker from embedding vectors")
    s.add_argument("--user", required=True)
    s.add_argument("--embeddings-file", required=True)
    s.add_argument("--persona", help="text file with the user's onboarding persona")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("identify", help="match one embedding against the registry")
    s.add_argument("--embedding-file", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--register", action="store_true", help="register an unmatched probe as a new speaker")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("chat", help="run one conversational turn")
    who = s.add_mutually_exclusive_group()
    who.add_argument("--user")
    who.add_argument("--voice-embedding", help="file holding one speaker embedding")
    s.add_argument("--query", required=True)
    s.add_argument("--condition", choices=[c.value for c in Condition])
    s.add_argument("--backend", choices=["echo", "scripted", "http"])
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_chat)

    s = sub.add_parser("ingest", help="validate a PAT-format JSONL dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--rejects", help="write malformed lines to this JSONL file")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("eval", help="run the interleaved multi-user evaluation")
    s.add_argument("--dataset", help="PAT-format JSONL (default: built-in synthetic fixture)")
    s.add_argument("--pairs", type=int, default=15)
    s.add_argument("--turns-per-user", type=int, default=10)
    s.add_argument("--conditions", default="no-persona,constant,adaptive")
    s.add_argument("--backend", choices=["persona_injecting", "echo", "scripted", "http"])
    s.add_argument("--cold-start", action="store_true", help="add an adaptive run without onboarding profiles")
    s.add_argument("--voice", action="store_true", help="route through synthetic speaker embeddings")
    s.add_argument("--out", help="report path (.json, .csv or .txt)")
    s.add_argument("--format", choices=["json", "csv", "text"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("validate-speakers", help="synthetic speaker identification check")
    s.add_argument("--speakers", type=int, default=5)
    s.add_argument("--enroll-n", type=int, default=5)
    s.add_argument("--test-n", type=int, default=10)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--dim", type=int, default=192)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_validate_speakers)

    s = sub.add_parser("report", help="re-render a saved report")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=["text", "json", "csv"], default="text")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("config", help="print the effective configuration (secrets redacted)")
    s.set_defaults(func=cmd_config)
    return p


def _overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "condition", None):
        over.setdefault("engine", {})["condition"] = args.condition
    if getattr(args, "threshold", None) is not None:
        over["speaker"] = {"threshold": args.threshold}
    if getattr(args, "backend", None) and args.command == "chat":
        over["backend"] = {"kind": args.backend}
    return over


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return args.func(args, cfg, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CorruptStore as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BackendUnavailable, ScriptMiss, EmbedUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (InsufficientData, AfaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
