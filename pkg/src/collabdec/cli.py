"""Command-line entry points.

Exit codes: 0 success, 2 config/usage error, 3 backend unreachable,
4 partial failure, 5 verification or conformance violation.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click

from . import __version__
from .errors import BackendError, CollabError, ConfigError, VerificationError
from .harness import (ExperimentConfig, assert_replay, load_config,
                      load_prompts, run_experiment, validate_config)
from .serialize import canon_dumps

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4
EXIT_VERIFICATION = 5

LOG_ENV = "COLLAB_LOG"


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map domain errors onto the documented exit codes."""
    try:
        return fn()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except VerificationError as exc:
        _fail(EXIT_VERIFICATION, str(exc))
    except BackendError as exc:  # includes NetworkError and protocol errors
        _fail(EXIT_BACKEND, str(exc))
    except CollabError as exc:
        _fail(EXIT_PARTIAL, str(exc))


@click.group()
@click.version_option(version=__version__, prog_name="collabdec")
def main() -> None:
    """Multi-agent switching decoder: decode, evaluate, verify, conform."""
    _setup_logging()


def _apply_overrides(cfg: ExperimentConfig, override: bool,
                     **flags) -> ExperimentConfig:
    supplied = {k: v for k, v in flags.items() if v is not None}
    if not supplied:
        return cfg
    if not override:
        log.warning("flags %s ignored (config file wins; pass --override)",
                    sorted(supplied))
        return cfg
    raw = cfg.model_dump(mode="json")
    for key, value in supplied.items():
        section, _, leaf = key.partition(".")
        if leaf:
            raw[section][leaf] = value
        else:
            raw[section] = value
    return validate_config(raw)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=False), help="experiment config file")
@click.option("--output-dir", default=None, help="override the output directory")
@click.option("--seed", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--top-k", type=int, default=None)
@click.option("--max-new-tokens", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--fail-fast/--no-fail-fast", default=None)
@click.option("--override", is_flag=True, default=False,
              help="let command-line flags win over config file values")
def run(config_path, output_dir, seed, alpha, top_k, max_new_tokens, workers,
        fail_fast, override):
    """Run a full experiment: every prompt x every method."""

    def go() -> int:
        cfg = load_config(config_path)
        cfg = _apply_overrides(
            cfg, override,
            **{"decoder.seed": seed, "decoder.alpha": alpha,
               "decoder.top_k": top_k, "decoder.max_new_tokens": max_new_tokens,
               "workers": workers, "fail_fast": fail_fast})
        # choosing where outputs land is routing, not a config conflict
        result = run_experiment(cfg, out_dir=output_dir)
        for summary in result.report.summaries:
            norm = ("" if summary.normalized_reward is None
                    else f"  normalized={summary.normalized_reward:.6g}")
            click.echo(f"{summary.method}: mean_reward="
                       f"{summary.mean_reward:.6g}{norm} "
                       f"(n={summary.n_prompts})")
        for failure in result.failures:
            click.echo(f"FAILED p{failure['prompt_index']} "
                       f"{failure['method']}: {failure['error_kind']}",
                       err=True)
        click.echo(f"outputs in {result.out_dir}")
        return result.exit_code

    sys.exit(_guard(go))


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=False))
@click.option("--prompt", "prompt_text", required=True,
              help="token ids ('0 1 2') or labels with --labels")
@click.option("--labels", is_flag=True, default=False)
@click.option("--method", default="collab", show_default=True,
              help="collab, single[:i], or bon")
def decode(config_path, prompt_text, labels, method):
    """Decode one prompt and print its trace."""

    def go() -> int:
        from .harness import (PromptSpec, _decode_job, _parse_method,
                              build_workbench)
        cfg = load_config(config_path)
        try:
            _parse_method(method, len(cfg.agents))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bench = build_workbench(cfg)
        try:
            spec = PromptSpec(mode="labels" if labels else "ids",
                              inline=[prompt_text], cap=cfg.prompts.cap)
            prompt = load_prompts(spec, bench.vocab).prompts[0]
            result = _decode_job(bench, 0, prompt, method)
            if result.error is not None:
                raise VerificationError(
                    f"decode failed [{result.error_kind}]: {result.error}")
            click.echo(result.trace.dumps(), nl=False)
            counts = ", ".join(f"agent {a}: {n} tokens"
                               for a, n in sorted(result.trace.attribution.items()))
            click.echo(f"# attribution: {counts}", err=True)
            return EXIT_OK
        finally:
            bench.close()

    sys.exit(_guard(go))


@main.command()
@click.option("--instances", "-n", type=int, default=100, show_default=True,
              help="number of seeded instances for the switching-gap bound")
@click.option("--draws", type=int, default=100, show_default=True,
              help="number of (instance, i, j, s, z) draws for the Q-gap bound")
@click.option("--vocab-size", type=int, default=3, show_default=True)
@click.option("--horizon", type=int, default=3, show_default=True)
@click.option("--agents", "n_agents", type=int, default=2, show_default=True)
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pistar", type=click.Choice(["unregularized", "gibbs", "both"]),
              default="unregularized", show_default=True)
@click.option("--corrupt", is_flag=True, default=False,
              help="negative control: verify a deliberately broken instance")
@click.option("--out", "out_path", default=None,
              help="write the full results document here")
def verify(instances, draws, vocab_size, horizon, n_agents, beta, alpha,
           seed, pistar, corrupt, out_path):
    """Certify the decoder's sub-optimality bounds on random instances."""

    def go() -> int:
        from .theory import (InstanceParams, corrupt_instance, run_lemma_suite,
                             run_theorem_suite, verify_instance_theorem)
        if corrupt:
            inst = corrupt_instance()
            reports = verify_instance_theorem(inst, alpha=alpha)
            bad = [r for r in reports if not r.holds]
            worst = min(r.slack for r in reports)
            click.echo(f"corrupt instance: {len(bad)}/{len(reports)} checks "
                       f"violated, min slack {worst:.6g}")
            if out_path:
                Path(out_path).write_text(canon_dumps(
                    [r.to_obj() for r in reports]))
            if bad:
                raise VerificationError(
                    "bound violated on the corrupt instance (as constructed)")
            click.echo("WARNING: corrupt instance produced no violation")
            return EXIT_OK
        if instances < 1:
            raise ConfigError(f"--instances must be >= 1, got {instances}")
        if draws < 0:
            raise ConfigError(f"--draws must be >= 0, got {draws}")
        params = InstanceParams(vocab_size=vocab_size, horizon=horizon,
                                n_agents=n_agents, beta=beta)
        variants = ["unregularized", "gibbs"] if pistar == "both" else [pistar]
        results = []
        violated = False
        for variant in variants:
            suite = run_theorem_suite(instances, params, seed=seed,
                                      alpha=alpha, pistar=variant)
            results.append(suite)
            click.echo(f"switching-gap bound [{variant}]: "
                       f"{suite.n_checks - suite.n_violations}/{suite.n_checks} "
                       f"hold ({suite.pass_rate:.2%}), "
                       f"min slack {suite.min_slack:.3e}")
            violated = violated or not suite.all_hold
        if draws:
            suite = run_lemma_suite(draws, params, seed=seed)
            results.append(suite)
            click.echo(f"cross-agent Q-gap bound: "
                       f"{suite.n_checks - suite.n_violations}/{suite.n_checks} "
                       f"hold ({suite.pass_rate:.2%}), "
                       f"min slack {suite.min_slack:.3e}")
            violated = violated or not suite.all_hold
        if out_path:
            Path(out_path).write_text(canon_dumps(
                [s.to_obj() for s in results]))
        if violated:
            raise VerificationError("at least one certified bound was violated")
        return EXIT_OK

    sys.exit(_guard(go))


@main.command()
@click.option("--url", required=True, help="endpoint base URL")
@click.option("--timeout-ms", type=int, default=10_000, show_default=True)
@click.option("--attempts", type=int, default=3, show_default=True)
@click.option("--out", "out_path", default=None)
def conformance(url, timeout_ms, attempts, out_path):
    """Run the wire-protocol conformance suite against a live endpoint."""

    def go() -> int:
        from .remote import Endpoint, run_conformance
        ep = Endpoint(base_url=url, timeout_ms=timeout_ms, attempts=attempts)
        report = run_conformance(ep)
        for check in report.checks:
            status = ("SKIP" if check.skipped
                      else "PASS" if check.passed else "FAIL")
            kind = f" [{check.error_kind}]" if check.error_kind else ""
            click.echo(f"{status} {check.name}{kind}: {check.detail}")
        if out_path:
            Path(out_path).write_text(report.dumps())
        if not report.passed:
            raise VerificationError(f"endpoint {url} violates the protocol")
        click.echo(f"endpoint {url} conforms to protocol 1.x")
        return EXIT_OK

    sys.exit(_guard(go))


@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=False))
@click.option("--out-dir", default=None,
              help="where to place the replayed outputs")
def replay(manifest_path, out_dir):
    """Re-execute a recorded run and require byte-identical outputs."""

    def go() -> int:
        assert_replay(manifest_path, out_dir)
        click.echo("replay matches the recorded run")
        return EXIT_OK

    sys.exit(_guard(go))


if __name__ == "__main__":
    main()
