"""
Command-line interface: one subcommand per pipeline stage.

    semsentry gen       --config configs/driving_reference.yaml --out episodes.jsonl
    semsentry monitor   --episodes episodes.jsonl --backend oracle --out verdicts.jsonl
    semsentry fit       --episodes episodes.jsonl --models models/
    semsentry calibrate --episodes episodes.jsonl --models models/ --quantile 0.95
    semsentry score     --episodes episodes.jsonl --models models/ --out scores.jsonl
    semsentry eval      --episodes episodes.jsonl verdicts.jsonl scores.jsonl --compare
    semsentry probe     --episodes episodes.jsonl --episode-id anomalous_stop-000

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Union

import numpy as np

from . import baselines, describer, evaluation, monitor
from .backends import (
    BACKEND_CHOICES,
    Backend,
    RemoteBackend,
    ReplayBackend,
    RuleOracleConfig,
    build_backend,
    load_oracle_rules,
)
from .baselines import (
    BaselineModels,
    CalibratedDetector,
    GaussianMixtureModel,
    PcaModel,
    calibrate,
    detector_verdicts,
    episode_scores,
    fit_gmm,
    fit_pca,
    load_model,
    save_model,
    select_n_components,
)
from .config import RunConfig, load_run_config, require_file
from .describer import OrderPolicy, vocabulary_for
from .episodes import (
    NOMINAL_DRIVING_CLASSES,
    Episode,
    FailedVerdict,
    FailureReason,
    ScenarioClass,
    Verdict,
    TaskOutcome,
    append_verdicts,
    read_episodes,
    read_verdicts,
    write_episodes,
    write_verdicts,
)
from .evaluation import build_report, load_reference, render_report
from .exceptions import (
    EXIT_OK,
    EXIT_USAGE,
    BackendError,
    ConfigError,
    SemSentryError,
    ValidationError,
)
from .logging_utils import configure_cli_logging, get_logger
from .monitor import monitor_episode, probe_order_sensitivity
from .prompts import PromptTemplate, load_template
from .scenegen import generate

logger = get_logger("cli")

EPISODES_HINT = "Generate a corpus with 'semsentry gen --config <file> --out <episodes file>'."
VERDICTS_HINT = "Produce verdicts with 'semsentry monitor' or 'semsentry score' first."
DEFAULT_TEMPLATES = {"driving": "driving_fewshot", "manipulation": "manip_zeroshot"}
TALLIES = (describer.tally, monitor.tally, baselines.tally, evaluation.tally)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _domain(episode: Episode) -> str:
    return "manipulation" if episode.scenario_class.is_manipulation else "driving"


def _load_episodes(config: RunConfig) -> List[Episode]:
    path = require_file(config.episodes, "episodes file", EPISODES_HINT)
    episodes = read_episodes(path)
    if not episodes:
        raise ValidationError(f"Episode file {path} is empty", ["no episodes"])
    return episodes


def reference_episodes(episodes: Sequence[Episode]) -> List[Episode]:
    """
    Episodes the baselines learn "normal" from.

    Nominal driving episodes when the corpus has any; otherwise successful
    baseline manipulation episodes (all baseline episodes when outcomes are
    unknown).
    """
    nominal = [ep for ep in episodes if ep.scenario_class in NOMINAL_DRIVING_CLASSES]
    if nominal:
        return nominal
    baseline = [ep for ep in episodes if ep.scenario_class is ScenarioClass.MANIP_BASELINE]
    successes = [ep for ep in baseline if ep.task_outcome is TaskOutcome.SUCCESS]
    chosen = successes or baseline
    if not chosen:
        raise ValidationError(
            "Corpus has no nominal driving or baseline manipulation episodes to fit on",
            ["no reference episodes"],
        )
    return chosen


def _model_path(config: RunConfig, name: str) -> Path:
    return Path(config.models_dir) / f"{name}.json"


def _detector_path(config: RunConfig) -> Path:
    return _model_path(config, f"detector-{config.score_kind.replace(':', '-')}")


def _load_models(config: RunConfig) -> BaselineModels:
    if config.score_kind.startswith(baselines.EXTERNAL_PREFIX):
        return BaselineModels()
    pca = load_model(_model_path(config, "pca"), "pca")
    assert isinstance(pca, PcaModel)
    if config.score_kind == "recon_error":
        return BaselineModels(pca=pca)
    gmm = load_model(_model_path(config, "gmm"), "gmm")
    assert isinstance(gmm, GaussianMixtureModel)
    return BaselineModels(pca=pca, gmm=gmm)


def _oracle_rules(config: RunConfig, episodes: Sequence[Episode]) -> Optional[RuleOracleConfig]:
    if not config.oracle_rules:
        return None
    domains = {_domain(ep) for ep in episodes}
    if len(domains) != 1:
        raise ConfigError(
            "A custom oracle rule file needs a single-domain corpus", key="oracle_rules"
        )
    return load_oracle_rules(config.oracle_rules, domains.pop())


def _build_backend(
    config: RunConfig, rules: Optional[RuleOracleConfig], backoff_factor: Optional[float] = None
) -> Backend:
    remote_kwargs: Dict[str, Any] = {"timeout_s": config.timeout_s, "max_tries": config.max_tries}
    if backoff_factor is not None:
        remote_kwargs["backoff_factor"] = backoff_factor
    return build_backend(
        config.backend,
        cache_path=config.cache,
        schema=config.wire_schema,
        oracle_rules=rules,
        record_inner=config.record_inner,
        **remote_kwargs,
    )


def _close_backend(backend: Backend) -> None:
    if isinstance(backend, ReplayBackend):
        logger.info(f"💾 Replay cache: {backend.hits} hit(s), {backend.misses} miss(es)")
        if backend.inner is not None:
            _close_backend(backend.inner)
        backend.cache.close()
    elif isinstance(backend, RemoteBackend):
        backend.close()


class _TemplateCache:
    """Templates per domain, loaded once per command"""

    def __init__(self, config: RunConfig):
        self.config = config
        self._loaded: Dict[str, PromptTemplate] = {}

    def for_episode(self, episode: Episode) -> PromptTemplate:
        name = self.config.template or DEFAULT_TEMPLATES[_domain(episode)]
        if name not in self._loaded:
            self._loaded[name] = load_template(name)
        return self._loaded[name]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(config: RunConfig, out: Optional[str] = None) -> Path:
    """Generate a corpus from the config's ``gen`` section"""
    if config.gen is None:
        raise ConfigError(
            f"{config.source} has no 'gen' section. "
            "Pass --config configs/driving_reference.yaml or another file with one.",
            key="gen",
        )
    gen = config.gen
    if config.vocabulary and gen.vocabulary is None:
        gen = dataclasses.replace(gen, vocabulary=config.vocabulary)

    episodes = generate(gen)
    path = Path(out or config.episodes or "episodes.jsonl")
    write_episodes(episodes, path)

    frames = sum(len(ep.frames) for ep in episodes)
    intervals = sum(len(ep.anomaly_intervals) for ep in episodes)
    logger.summary(
        f"✅ Generated {len(episodes)} episodes, {frames} frames, {intervals} anomaly "
        f"interval(s) (seed {gen.seed}) -> {path}"
    )
    return path


def _needs_retry(verdict: Verdict, monitor_name: str) -> bool:
    return (
        verdict.monitor == monitor_name
        and isinstance(verdict, FailedVerdict)
        and verdict.reason is FailureReason.BACKEND_ERROR
    )


def _completed_timesteps(path: Path, monitor_name: str) -> Dict[str, Set[int]]:
    """
    Timesteps of ``monitor_name`` already answered in ``path``.

    Parsed verdicts and unparseable responses count as answered. Backend
    failures do not: their markers are removed from the file so the retried
    frame ends up with a single record.
    """
    done: Dict[str, Set[int]] = {}
    if not path.exists():
        return done
    verdicts = read_verdicts(path)
    kept = [v for v in verdicts if not _needs_retry(v, monitor_name)]
    if len(kept) < len(verdicts):
        write_verdicts(kept, path)
        logger.info(f"🔁 Retrying {len(verdicts) - len(kept)} backend-failed frame(s)")
    for verdict in kept:
        if verdict.monitor == monitor_name:
            done.setdefault(verdict.episode_id, set()).add(verdict.timestep)
    return done


def cmd_monitor(
    config: RunConfig, out: Optional[str] = None, backoff_factor: Optional[float] = None
) -> Path:
    """
    Monitor every episode of a corpus and append verdicts per episode.

    Frames whose verdict is already in the output file are skipped, so an
    interrupted run resumes where it stopped; frames that failed at the
    backend are queried again.
    """
    episodes = _load_episodes(config)
    path = Path(out or config.verdicts or "verdicts.jsonl")
    sampler = config.sampler
    done = _completed_timesteps(path, sampler.monitor_name)
    if done:
        logger.info(f"⏩ Resuming: {sum(len(t) for t in done.values())} verdict(s) in {path}")

    templates = _TemplateCache(config)
    backend = _build_backend(config, _oracle_rules(config, episodes), backoff_factor)
    written = failed = 0
    try:
        for index, episode in enumerate(episodes, start=1):
            episode_sampler = dataclasses.replace(sampler, skip=done.get(episode.id, set()))
            verdicts = monitor_episode(
                episode,
                templates.for_episode(episode),
                backend,
                episode_sampler,
                vocabulary_for(episode.scenario_class, config.vocabulary),
            )
            if verdicts:
                append_verdicts(verdicts, path)
            written += len(verdicts)
            failed += sum(isinstance(v, FailedVerdict) for v in verdicts)
            logger.info(f"📼 [{index}/{len(episodes)}] {episode.id}: {len(verdicts)} verdict(s)")
    finally:
        _close_backend(backend)

    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.touch()
    logger.summary(
        f"✅ Monitored {len(episodes)} episodes with {backend.name}: {written} new verdict(s), "
        f"{failed} failed, {sum(len(t) for t in done.values())} already present -> {path}"
    )
    return path


def cmd_fit(config: RunConfig) -> List[Path]:
    """Fit PCA and a GMM in PCA coordinates on the reference episodes' embeddings"""
    training = reference_episodes(_load_episodes(config))
    vectors = [f.embedding for ep in training for f in ep.frames if f.embedding is not None]
    if not vectors:
        raise ValidationError(
            "Reference episodes carry no embeddings; generate with embedding_dim > 0",
            ["no embeddings"],
        )
    data = np.asarray(vectors, dtype=np.float64)
    n, d = data.shape
    k = min(config.pca_dim, n - 1, d)
    if k != config.pca_dim:
        logger.info(f"📐 PCA dimension reduced from {config.pca_dim} to {k} (n={n}, d={d})")

    pca = fit_pca(data, k)
    reduced = np.vstack([pca.project(x) for x in data])
    if config.n_components == "auto":
        n_components = select_n_components(reduced, seed=config.seed)
    else:
        n_components = int(config.n_components)
    gmm = fit_gmm(reduced, n_components, seed=config.seed)

    paths = [_model_path(config, "pca"), _model_path(config, "gmm")]
    save_model(pca, paths[0])
    save_model(gmm, paths[1])
    logger.summary(
        f"✅ Fitted PCA (k={k}) and GMM (K={n_components}) on {n} frames from "
        f"{len(training)} episodes -> {config.models_dir}"
    )
    return paths


def cmd_calibrate(config: RunConfig, out: Optional[str] = None) -> Path:
    """Calibrate the configured score kind on the reference episodes"""
    training = reference_episodes(_load_episodes(config))
    models = _load_models(config)
    scores = [score for _, _, score in episode_scores(models, config.score_kind, training)]
    detector = calibrate(scores, config.quantile, config.score_kind)
    path = Path(out) if out else _detector_path(config)
    save_model(detector, path)
    logger.summary(f"✅ Detector {config.score_kind} calibrated on {len(scores)} frames -> {path}")
    return path


def _scores_path(config: RunConfig) -> Path:
    """Detector verdicts sit next to the LLM verdicts, else next to the episodes"""
    anchor = config.verdicts or config.episodes or "episodes.jsonl"
    return Path(anchor).parent / f"scores-{config.score_kind.replace(':', '-')}.jsonl"


def cmd_score(config: RunConfig, out: Optional[str] = None) -> Path:
    """Flag every scorable frame with the calibrated detector"""
    episodes = _load_episodes(config)
    detector = load_model(_detector_path(config), "detector")
    assert isinstance(detector, CalibratedDetector)
    verdicts = detector_verdicts(_load_models(config), detector, episodes)
    path = Path(out) if out else _scores_path(config)
    write_verdicts(verdicts, path)
    flagged = sum(v.is_anomaly for v in verdicts)
    logger.summary(
        f"✅ Scored {len(verdicts)} frames with {detector.score_kind}: {flagged} flagged -> {path}"
    )
    return path


def cmd_eval(
    config: RunConfig,
    verdict_files: Sequence[str] = (),
    out_dir: Optional[str] = None,
    compare: Optional[str] = None,
) -> List[Path]:
    """
    Report every metric for the joined verdict files.

    ``compare`` None skips the reference; an empty string compares against
    the configured (or shipped) reference results.
    """
    episodes = _load_episodes(config)
    files = list(verdict_files) or ([config.verdicts] if config.verdicts else [])
    if not files:
        raise ConfigError(f"No verdict files given. {VERDICTS_HINT}", key="verdicts")
    verdicts = []
    for name in files:
        verdicts.extend(read_verdicts(require_file(name, "verdict file", VERDICTS_HINT)))

    bundle = build_report(episodes, verdicts, config.compare_as)
    reference = None
    if compare is not None:
        reference = load_reference(compare or config.reference or None)

    directory = Path(out_dir or config.reports_dir)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in config.report_formats:
        text = render_report(bundle, fmt, reference)
        path = directory / f"report.{'txt' if fmt == 'text' else fmt}"
        path.write_text(text, encoding="utf-8")
        paths.append(path)
        if fmt == "text":
            sys.stdout.write(text)

    logger.summary(
        f"✅ Evaluated {len(verdicts)} verdict(s) from {len(files)} file(s) over "
        f"{len(episodes)} episodes -> {', '.join(str(p) for p in paths)}"
    )
    return paths


def cmd_probe(
    config: RunConfig,
    episode_id: str,
    timestep: Optional[int] = None,
    n_seeds: int = 5,
    backoff_factor: Optional[float] = None,
) -> bool:
    """Probe one frame's order sensitivity; returns whether the verdicts agreed"""
    episodes = {ep.id: ep for ep in _load_episodes(config)}
    if episode_id not in episodes:
        raise ConfigError(f"No episode '{episode_id}' in {config.episodes}", key="episode_id")
    episode = episodes[episode_id]
    if timestep is None:
        timestep = (
            episode.anomaly_intervals[0].start
            if episode.anomaly_intervals
            else episode.frames[0].timestep
        )
    frame = episode.frame_at(timestep)
    if frame is None:
        raise ConfigError(f"Episode '{episode_id}' has no frame at t={timestep}", key="timestep")

    backend = _build_backend(config, _oracle_rules(config, [episode]), backoff_factor)
    try:
        result = probe_order_sensitivity(
            frame,
            _TemplateCache(config).for_episode(episode),
            backend,
            range(n_seeds),
            vocab=vocabulary_for(episode.scenario_class, config.vocabulary),
            task_spec=episode.task_spec,
            sampler_config=dataclasses.replace(config.sampler, max_in_flight=1),
            entity_id=episode.id,
        )
    finally:
        _close_backend(backend)

    for row in result.rows:
        outcome = row.overall.value if row.overall is not None else f"failed ({row.error})"
        sys.stdout.write(f"seed {row.seed}: {outcome} | {' ; '.join(row.lines)}\n")
    logger.summary(
        f"✅ Probed {episode_id}@{timestep} over {len(result.rows)} orders: "
        f"{'consistent' if result.consistent else 'inconsistent'}, "
        f"anomaly fraction {result.anomaly_fraction:.2f}"
    )
    return result.consistent


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE"""

    def error(self, message: str) -> Any:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _components(value: str) -> Union[int, str]:
    if value == "auto":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got '{value}'") from None


def _common_arguments() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration (YAML)")
    common.add_argument("--episodes", help="Episode file (JSON Lines)")
    common.add_argument("--out", help="Output file or directory")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--vocabulary", help="Vocabulary file (YAML)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More logging")
    common.add_argument("-q", "--quiet", action="count", default=0, help="Less logging")
    return common


def _backend_arguments() -> argparse.ArgumentParser:
    group = _Parser(add_help=False)
    group.add_argument("--backend", choices=BACKEND_CHOICES, help="Language-model backend")
    group.add_argument("--cache", help="Replay cache database (replay/record backends)")
    group.add_argument("--template", help="Template name or path")
    group.add_argument("--stride", type=int, help="Query every n-th frame")
    group.add_argument("--target-hz", type=float, help="Derive the stride from a query rate")
    group.add_argument("--max-in-flight", type=int, help="Concurrent backend calls")
    group.add_argument("--monitor-name", help="Name recorded on verdicts")
    group.add_argument("--order-policy", choices=[p.value for p in OrderPolicy])
    group.add_argument(
        "--keyword-fallback",
        action="store_true",
        default=None,
        help="Accept an anomaly keyword in the last lines when no classification line parses",
    )
    return group


def _detector_arguments() -> argparse.ArgumentParser:
    group = _Parser(add_help=False)
    group.add_argument("--models", dest="models_dir", help="Model directory")
    group.add_argument(
        "--detector",
        dest="score_kind",
        help="Score kind: gmm_nll, mahalanobis_min, recon_error or external:<name>",
    )
    return group


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semsentry", description="LLM-based semantic anomaly monitoring")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common_arguments()
    backend = _backend_arguments()
    detector = _detector_arguments()

    commands.add_parser("gen", parents=[common], help="Generate a synthetic corpus")
    commands.add_parser("monitor", parents=[common, backend], help="Monitor a corpus")

    fit = commands.add_parser("fit", parents=[common, detector], help="Fit PCA and GMM")
    fit.add_argument("--pca-dim", type=int, help="PCA dimension")
    fit.add_argument("--components", dest="n_components", type=_components, help="GMM K or auto")

    calibrate_cmd = commands.add_parser(
        "calibrate", parents=[common, detector], help="Calibrate a detector threshold"
    )
    calibrate_cmd.add_argument("--quantile", type=float, help="Calibration quantile")

    commands.add_parser("score", parents=[common, detector], help="Flag frames with a detector")

    eval_cmd = commands.add_parser("eval", parents=[common], help="Report metrics")
    eval_cmd.add_argument("verdict_files", nargs="*", help="Verdict files to join")
    eval_cmd.add_argument(
        "--compare",
        nargs="?",
        const="",
        help="Add reference and delta rows (optionally from a reference file)",
    )
    eval_cmd.add_argument(
        "--format", dest="report_formats", choices=evaluation.REPORT_FORMATS, action="append"
    )

    probe = commands.add_parser(
        "probe", parents=[common, backend], help="Measure description-order sensitivity"
    )
    probe.add_argument("--episode-id", required=True)
    probe.add_argument("--timestep", type=int)
    probe.add_argument("--seeds", type=int, default=5, help="Number of permutations")
    return parser


OVERRIDE_FLAGS = (
    "episodes",
    "seed",
    "vocabulary",
    "backend",
    "cache",
    "template",
    "stride",
    "target_hz",
    "max_in_flight",
    "monitor_name",
    "order_policy",
    "keyword_fallback",
    "models_dir",
    "score_kind",
    "pca_dim",
    "n_components",
    "quantile",
    "report_formats",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """The config file (or defaults) with command-line flags applied"""
    config = load_run_config(args.config)
    overrides = {name: getattr(args, name, None) for name in OVERRIDE_FLAGS}
    if overrides["order_policy"] is not None:
        overrides["order_policy"] = OrderPolicy(overrides["order_policy"])
    if overrides["report_formats"] is not None:
        overrides["report_formats"] = tuple(overrides["report_formats"])
    return config.with_overrides(**overrides)


def _dispatch(config: RunConfig, args: argparse.Namespace) -> int:
    handlers: Dict[str, Callable[[], Any]] = {
        "gen": lambda: cmd_gen(config, args.out),
        "monitor": lambda: cmd_monitor(config, args.out),
        "fit": lambda: cmd_fit(
            dataclasses.replace(config, models_dir=args.out) if args.out else config
        ),
        "calibrate": lambda: cmd_calibrate(config, args.out),
        "score": lambda: cmd_score(config, args.out),
        "eval": lambda: cmd_eval(config, args.verdict_files, args.out, args.compare),
        "probe": lambda: cmd_probe(config, args.episode_id, args.timestep, args.seeds),
    }
    handlers[args.command]()
    return EXIT_OK


def _hint(error: SemSentryError) -> str:
    if isinstance(error, BackendError):
        return (
            "Check SEMSENTRY_API_URL / SEMSENTRY_API_KEY, or run offline with "
            "--backend oracle or --backend replay --cache <file>."
        )
    if isinstance(error, ValidationError):
        return "Regenerate the input with 'semsentry gen' or fix the named record."
    return ""


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    args = build_parser().parse_args(argv)
    configure_cli_logging(args.verbose - args.quiet)
    for tally in TALLIES:
        tally.reset()

    try:
        return _dispatch(resolve_config(args), args)
    except SemSentryError as e:
        logger.error(f"❌ {e}")
        hint = _hint(e)
        if hint:
            logger.error(f"💡 {hint}")
        return e.exit_code
    finally:
        for tally in TALLIES:
            tally.log_summary()


if __name__ == "__main__":
    sys.exit(main())
