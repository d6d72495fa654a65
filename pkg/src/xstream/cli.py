"""Command-line surface: train, generate, serve, client, bench, inspect.

Configuration comes from an optional `key = value` file plus repeatable
`--set key=value` overrides; every key must belong to a known namespace
(seg, actor, rope, diffusion, data, thinker, stream, train) and unknown
keys are rejected by name. Observable output is JSON lines on stdout, one
object per event, so goldens are language-neutral.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import dforce
from .actor import ActorConfig, ActorModel, GenerationSession, NAIVE, PYRAMID
from .errors import ConfigError, ProtocolError, XStreamError
from .interleave import SegmentConfig, config_section, load_config_file
from .numcore import available_backends, kernels, load_xtar, save_xtar
from .thinker import Thinker, ThinkerConfig
from .trainkit import (
    DataConfig,
    SyntheticScene,
    TrainState,
    save_checkpoint,
    load_checkpoint,
    train as run_train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_NAMESPACES = ("seg", "actor", "rope", "diffusion", "data", "thinker",
               "stream", "train")
_ROPE_KEYS = {"base", "dim_split"}
_DIFFUSION_KEYS = {"steps", "schedule", "seed"}
_STREAM_KEYS = {"queue_capacity", "frame_capacity", "pacing"}
_TRAIN_KEYS = {"steps", "lr", "batch_size", "mode", "log_every",
               "checkpoint_every"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting itself."""

    def error(self, message):
        raise _UsageError(message)


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- configuration ------------------------------------------------------------

def load_config(path: str | None, overrides: list[str]) -> dict[str, str]:
    cfg = load_config_file(path) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        cfg[key.strip()] = value.strip()
    for key in cfg:
        ns, _, rest = key.partition(".")
        if not rest or ns not in _NAMESPACES:
            raise ConfigError(f"unknown config key {key!r}")
    for key in config_section(cfg, "rope"):
        if key not in _ROPE_KEYS:
            raise ConfigError(f"unknown config key 'rope.{key}'")
    for key in config_section(cfg, "diffusion"):
        if key not in _DIFFUSION_KEYS:
            raise ConfigError(f"unknown config key 'diffusion.{key}'")
    for key in config_section(cfg, "stream"):
        if key not in _STREAM_KEYS:
            raise ConfigError(f"unknown config key 'stream.{key}'")
    for key in config_section(cfg, "train"):
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown config key 'train.{key}'")
    return cfg


class Components:
    """Everything a verb needs, assembled once from the flat config."""

    def __init__(self, cfg: dict[str, str]):
        self.seg = SegmentConfig.from_mapping(config_section(cfg, "seg"))
        actor_map = dict(config_section(cfg, "actor"))
        rope = config_section(cfg, "rope")
        if "base" in rope:
            actor_map.setdefault("rope_base", rope["base"])
        if "dim_split" in rope:
            actor_map.setdefault("rope_dim_split", rope["dim_split"])
        self.actor_cfg = ActorConfig.from_mapping(actor_map)
        diff = config_section(cfg, "diffusion")
        schedule = diff.get("schedule", "cosine")
        if schedule != "cosine":
            raise ConfigError(f"unknown diffusion schedule {schedule!r}")
        try:
            steps = int(diff.get("steps", 25))
            self.diffusion_seed = int(diff.get("seed", 0))
        except ValueError as err:
            raise ConfigError(f"bad diffusion config: {err}") from None
        self.sched = dforce.cosine_schedule(steps)
        self.data_cfg = DataConfig.from_mapping(config_section(cfg, "data"))
        thinker_map = dict(config_section(cfg, "thinker"))
        thinker_map.setdefault("hidden_dim", str(self.actor_cfg.cond_dim))
        self.thinker_cfg = ThinkerConfig.from_mapping(thinker_map)
        if self.thinker_cfg.hidden_dim != self.actor_cfg.cond_dim:
            raise ConfigError(
                f"thinker.hidden_dim {self.thinker_cfg.hidden_dim} must equal "
                f"actor.cond_dim {self.actor_cfg.cond_dim}")
        stream = config_section(cfg, "stream")
        from .stream import PipelineConfig
        try:
            self.pipeline_template = dict(
                queue_capacity=int(stream.get("queue_capacity", 2)),
                frame_capacity=int(stream.get("frame_capacity", 32)),
                pacing=stream.get("pacing", "unthrottled"),
            )
            PipelineConfig(seed=0, **self.pipeline_template)
        except ValueError as err:
            raise ConfigError(f"bad stream config: {err}") from None
        self.train_cfg = config_section(cfg, "train")

    def pipeline(self, seed: int, pacing: str | None = None):
        from .stream import PipelineConfig
        opts = dict(self.pipeline_template)
        if pacing is not None:
            opts["pacing"] = pacing
        return PipelineConfig(seed=seed, **opts)

    def model(self, seed: int, checkpoint: str | None = None) -> ActorModel:
        model = ActorModel(self.actor_cfg, self.seg, seed=seed)
        if checkpoint is not None:
            try:
                load_checkpoint(model, checkpoint)
            except XStreamError as err:
                raise ConfigError(
                    f"checkpoint {checkpoint!r} does not match the model "
                    f"config: {err}") from None
        return model

    def identity(self, seed: int) -> np.ndarray:
        scene = SyntheticScene(seed, self.seg, self.actor_cfg.cond_dim, 1,
                               speed=self.data_cfg.speed,
                               blob_sigma=self.data_cfg.blob_sigma)
        return scene.identity


def _parse_queries(items: list[str]) -> list[tuple[str, list[int]]]:
    queries = []
    for item in items or []:
        modality, sep, ids = item.partition(":")
        if not sep or modality not in ("text", "audio"):
            raise ConfigError(
                f"query {item!r} must look like text:1,2,3 or audio:4,5")
        try:
            tokens = [int(t) for t in ids.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"bad token ids in query {item!r}") from None
        if not tokens:
            raise ConfigError(f"query {item!r} has no tokens")
        queries.append((modality, tokens))
    if not queries:
        queries = [("text", [1, 2, 3])]
    return queries


# -- verbs --------------------------------------------------------------------

def _cmd_train(args) -> int:
    comps = Components(load_config(args.config, args.set))
    tcfg = comps.train_cfg
    steps = args.steps if args.steps is not None else int(tcfg.get("steps", 200))
    lr = float(tcfg.get("lr", 3e-4))
    batch = int(tcfg.get("batch_size", 8))
    mode = args.mode or tcfg.get("mode", "diffusion")
    model = comps.model(args.seed)
    os.makedirs(args.out, exist_ok=True)
    if steps == 0:
        # checkpoint the untouched init weights so downstream verbs can run
        state = TrainState(step=0, seed=args.seed, mode=mode)
        path = os.path.join(args.out, "checkpoint.xtar")
        save_checkpoint(model, state, path)
        with open(os.path.join(args.out, "loss.csv"), "w") as fh:
            fh.write("step,loss,mode\n")
        _emit({"event": "train_done", "steps": 0, "checkpoint": path,
               "mode": mode})
        return EXIT_OK
    state = run_train(model, comps.data_cfg, steps, lr, batch_size=batch,
                      mode=mode, seed=args.seed, sched=comps.sched,
                      out_dir=args.out,
                      log_every=int(tcfg.get("log_every", 50)),
                      checkpoint_every=int(tcfg.get("checkpoint_every", 1000)),
                      resume=args.resume)
    first = state.loss_history[0][1] if state.loss_history else float("nan")
    last = state.loss_history[-1][1] if state.loss_history else float("nan")
    _emit({"event": "train_done", "steps": state.step, "mode": mode,
           "checkpoint": state.checkpoint_path, "first_loss": first,
           "last_loss": last})
    return EXIT_OK


def _cmd_generate(args) -> int:
    comps = Components(load_config(args.config, args.set))
    from .stream import FRAME_CONTROL, FRAME_TEXT, FRAME_AUDIO, FRAME_VIDEO
    from .stream import run_session, control_from_payload, CONTROL_ERROR
    model = comps.model(args.seed, args.checkpoint)
    thinker = Thinker(comps.thinker_cfg, seed=args.seed)
    identity = comps.identity(args.seed)
    queries = _parse_queries(args.query)
    os.makedirs(args.out, exist_ok=True)
    names = {FRAME_TEXT: "text", FRAME_AUDIO: "audio", FRAME_VIDEO: "video"}
    latents: dict[str, np.ndarray] = {}
    events_path = os.path.join(args.out, "events.jsonl")
    failed = None
    with open(events_path, "w") as fh:
        for frame in run_session(queries, identity, thinker=thinker,
                                 model=model, sched=comps.sched,
                                 segments=args.segments,
                                 pipeline=comps.pipeline(args.seed)):
            if frame.type == FRAME_CONTROL:
                code, _, msg = control_from_payload(frame.payload)
                if code == CONTROL_ERROR:
                    failed = msg
                continue
            line = {"type": names[frame.type], "segment": frame.segment_id,
                    "chunk": frame.chunk_index, "bytes": len(frame.payload)}
            fh.write(json.dumps(line, sort_keys=True) + "\n")
            if frame.type == FRAME_VIDEO:
                from .stream import latents_from_payload
                latents[f"video/{frame.segment_id:04d}/{frame.chunk_index:04d}"] = \
                    latents_from_payload(frame.payload,
                                         comps.seg.tokens_per_video_chunk,
                                         comps.seg.latent_channels)
    if failed is not None:
        raise XStreamError(f"session failed: {failed}")
    xtar_path = os.path.join(args.out, "latents.xtar")
    save_xtar(xtar_path, latents)
    _emit({"event": "generate_done", "segments": args.segments,
           "events": events_path, "latents": xtar_path,
           "video_chunks": len(latents)})
    return EXIT_OK


def _cmd_serve(args) -> int:
    comps = Components(load_config(args.config, args.set))
    from .stream import serve
    model = comps.model(args.seed, args.checkpoint)
    thinker = Thinker(comps.thinker_cfg, seed=args.seed)
    identity = comps.identity(args.seed)
    import threading
    ready = threading.Event()

    def announce():
        ready.wait()
        _emit({"event": "serving", "port": ready.port})  # type: ignore[attr-defined]

    threading.Thread(target=announce, daemon=True).start()
    serve(args.host, args.port, thinker=thinker, model=model,
          sched=comps.sched, identity=identity,
          pipeline=comps.pipeline(args.seed, pacing=args.pacing),
          max_sessions=args.max_sessions, ready=ready)
    return EXIT_OK


def _cmd_client(args) -> int:
    comps = Components(load_config(args.config, args.set))
    from .stream import (FRAME_CONTROL, FRAME_TEXT, FRAME_AUDIO, FRAME_VIDEO,
                         connect_and_stream, control_from_payload,
                         latents_from_payload, measure_latency)
    queries = _parse_queries(args.query)
    names = {FRAME_TEXT: "text", FRAME_AUDIO: "audio", FRAME_VIDEO: "video",
             FRAME_CONTROL: "control"}
    latents: dict[str, np.ndarray] = {}

    def stream():
        for frame in connect_and_stream(args.host, args.port, queries,
                                        args.segments):
            if frame.type == FRAME_CONTROL:
                code, arg, msg = control_from_payload(frame.payload)
                _emit({"type": "control", "code": code, "arg": arg,
                       "message": msg})
            else:
                _emit({"type": names[frame.type], "segment": frame.segment_id,
                       "chunk": frame.chunk_index, "bytes": len(frame.payload)})
                if frame.type == FRAME_VIDEO and args.dump:
                    key = f"video/{frame.segment_id:04d}/{frame.chunk_index:04d}"
                    latents[key] = latents_from_payload(
                        frame.payload, comps.seg.tokens_per_video_chunk,
                        comps.seg.latent_channels)
            yield frame

    if args.latency:
        report = measure_latency(stream())
        _emit({"event": "latency", **report.as_dict()})
    else:
        for _ in stream():
            pass
    if args.dump:
        save_xtar(args.dump, latents)
        _emit({"event": "dumped", "path": args.dump, "entries": len(latents)})
    return EXIT_OK


def _bench_once(comps: Components, chunks: int, seed: int, mode: str) -> float:
    cond_rows = (comps.seg.text_tokens_per_segment
                 + comps.seg.audio_tokens_per_segment)
    v = comps.seg.video_chunks_per_segment
    segments = -(-chunks // v)
    rng = np.random.default_rng(seed)
    conds = [rng.normal(0.0, 1.0, (cond_rows, comps.actor_cfg.cond_dim))
             .astype(np.float32) for _ in range(segments)]
    model = ActorModel(comps.actor_cfg, comps.seg, seed=seed)
    identity = comps.identity(seed)
    session = GenerationSession(model, comps.sched, identity, seed=seed,
                                mode=mode)
    t0 = time.perf_counter()
    produced = 0
    for _chunk in session.run(iter(conds)):
        produced += 1
        if produced == chunks:
            break
    elapsed = time.perf_counter() - t0
    return elapsed


def _cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.steps is not None:
        cfg["diffusion.steps"] = str(args.steps)
    else:
        cfg.setdefault("diffusion.steps", "25")
    comps = Components(cfg)
    steps = comps.sched.steps
    naive_passes, pyramid_passes = dforce.pass_counts(args.chunks, steps)
    _emit({"event": "bench_passes", "chunks": args.chunks, "steps": steps,
           "naive": naive_passes, "pyramid": pyramid_passes})
    timings = {}
    for mode, passes in ((NAIVE, naive_passes), (PYRAMID, pyramid_passes)):
        seconds = _bench_once(comps, args.chunks, args.seed, mode)
        timings[mode] = seconds
        _emit({"event": "bench_time", "mode": mode, "passes": passes,
               "seconds": round(seconds, 4), "backend": kernels.BACKEND})
    _emit({"event": "bench_summary", "backend": kernels.BACKEND,
           "speedup": round(timings[NAIVE] / timings[PYRAMID], 3)
           if timings[PYRAMID] > 0 else None})
    if args.backends:
        for backend in available_backends():
            env = dict(os.environ, XSTREAM_KERNELS=backend)
            cmd = [sys.executable, "-m", "xstream.cli", "bench",
                   "--chunks", str(args.chunks), "--steps", str(steps),
                   "--seed", str(args.seed)]
            for override in args.set or []:
                cmd += ["--set", override]
            if args.config:
                cmd += ["--config", args.config]
            out = subprocess.run(cmd, env=env, capture_output=True, text=True)
            if out.returncode != 0:
                raise XStreamError(
                    f"backend {backend} bench failed: {out.stderr.strip()}")
            for line in out.stdout.splitlines():
                event = json.loads(line)
                if event.get("event") == "bench_time":
                    _emit({"event": "bench_backend", "backend": backend,
                           "mode": event["mode"],
                           "seconds": event["seconds"]})
    return EXIT_OK


def _cmd_inspect(args) -> int:
    path = args.path
    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")
    if path.endswith(".xtar"):
        arrays = load_xtar(path)
        for name in sorted(arrays):
            _emit({"entry": name, "shape": list(arrays[name].shape),
                   "dtype": str(arrays[name].dtype)})
        _emit({"event": "inspect_done", "kind": "xtar", "entries": len(arrays)})
    elif path.endswith(".csv"):
        import csv as _csv
        with open(path, newline="") as fh:
            rows = list(_csv.DictReader(fh))
        losses = [float(r["loss"]) for r in rows]
        _emit({"event": "inspect_done", "kind": "loss_csv", "rows": len(rows),
               "first_loss": losses[0] if losses else None,
               "last_loss": losses[-1] if losses else None})
    elif path.endswith(".jsonl"):
        counts: dict[str, int] = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    counts[json.loads(line).get("type", "?")] = \
                        counts.get(json.loads(line).get("type", "?"), 0) + 1
        _emit({"event": "inspect_done", "kind": "events", "counts": counts})
    else:
        raise ConfigError(f"cannot inspect {path!r}: unknown extension")
    return EXIT_OK


# -- entry --------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="xstream", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the video actor")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--mode", choices=["diffusion", "teacher"], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="run one offline session to files")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--query", action="append", metavar="MODALITY:IDS")
    p.add_argument("--segments", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("serve", help="serve sessions over TCP")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--pacing", choices=["realtime", "unthrottled"],
                   default=None)
    p.add_argument("--max-sessions", type=int, default=None)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("client", help="stream a session from a server")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--query", action="append", metavar="MODALITY:IDS")
    p.add_argument("--segments", type=int, default=1)
    p.add_argument("--latency", action="store_true",
                   help="print a latency report after the stream ends")
    p.add_argument("--dump", help="write received video latents to this .xtar")
    p.set_defaults(func=_cmd_client)

    p = sub.add_parser("bench", help="compare naive vs pyramid scheduling")
    common(p)
    p.add_argument("--chunks", type=int, default=6)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--backends", action="store_true",
                   help="also time each available kernel backend")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("inspect", help="summarize produced artifacts")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as err:
        print(f"protocol error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except XStreamError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
