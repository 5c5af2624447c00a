"""Operator-facing command line.

Exit codes are a stable interface: 0 ok, 1 usage, 2 validation, 3 audit or
replay finding, 4 scenario assertion failure, 5 transport failure.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import tempfile
import threading
from datetime import timedelta
from pathlib import Path

from .canonical import load_document
from .clock import format_timestamp
from .errors import (
    AssertionFailure,
    GiterError,
    IdentifierError,
    MergeConflict,
    NotTerminal,
    OwnershipViolation,
    PushExhausted,
    RemoteUnavailable,
    ScenarioError,
    ValidationFailed,
)
from .ownership import Role
from .pipeline import PIPELINES_FILE, parse_bindings, pipeline_reconcile_once
from .policy import audit_repo, load_policy, replay_history
from .reconcile import (
    DesiredResource,
    DesiredSet,
    ExternalHandler,
    LoopConfig,
    consumer_reconcile_once,
    producer_reconcile_once,
    run_loop,
)
from .resource import parse_resource
from .schema import validate_resource
from .sim import load_scenario, run_scenario
from .store import (
    Identity,
    archive_resource,
    fetch,
    history,
    init_repo,
    load_registry,
    open_repo,
    parse_ref,
    push_with_retry,
    read_resource,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_FINDING = 3
EXIT_ASSERTION = 4
EXIT_TRANSPORT = 5

CONFIG_FILE = Path.home() / ".config" / "giter" / "config.yaml"
_ENV_KEYS = {
    "repo": "GITER_REPO",
    "branch": "GITER_BRANCH",
    "email": "GITER_IDENTITY_EMAIL",
    "name": "GITER_IDENTITY_NAME",
    "role": "GITER_ROLE",
    "interval": "GITER_INTERVAL",
}


class CliError(GiterError):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _load_config_file() -> dict:
    if not CONFIG_FILE.is_file():
        return {}
    tree = load_document(CONFIG_FILE.read_bytes())
    return tree if isinstance(tree, dict) else {}


def _setting(args: argparse.Namespace, key: str, default=None):
    """flags > environment > config file."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    env_key = _ENV_KEYS.get(key)
    if env_key and os.environ.get(env_key):
        return os.environ[env_key]
    return _load_config_file().get(key, default)


def _output_mode(args: argparse.Namespace) -> str:
    return getattr(args, "output", None) or "human"


def _emit(args: argparse.Namespace, document: dict, human: str) -> None:
    if _output_mode(args) == "json":
        print(json.dumps(document, sort_keys=True))
    else:
        print(human)


def _open_handle(args: argparse.Namespace, role_required: bool = True):
    repo = _setting(args, "repo")
    if not repo:
        raise CliError("a repository is required (--repo or GITER_REPO)")
    role_raw = _setting(args, "role")
    if role_required and not role_raw:
        raise CliError("a role is required for this command (--role or GITER_ROLE)")
    role = Role(role_raw) if role_raw else Role.OBSERVER
    email = _setting(args, "email") or f"{role.value}@giter.local"
    name = _setting(args, "name") or role.value
    branch = _setting(args, "branch")
    return open_repo(repo, Identity(name, email, role), branch=branch)


def _print_report(args: argparse.Namespace, report) -> None:
    if _output_mode(args) == "json":
        print(json.dumps(report.to_dict(), sort_keys=True))
        return
    for action in report.actions:
        print(f"{action.resource_ref}: {action.action}" + (f" ({action.detail})" if action.detail else ""))
    for diagnostic in report.diagnostics:
        print(f"! {diagnostic}")
    if not report.actions and not report.diagnostics:
        print("nothing to do")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_init(args) -> int:
    handle = init_repo(args.path, branch=_setting(args, "branch") or "main", bare=args.bare)
    _emit(
        args,
        {"initialized": str(handle.root), "bare": handle.bare, "branch": handle.branch},
        f"initialized {'bare ' if handle.bare else ''}repository at {handle.root}",
    )
    return EXIT_OK


def _cmd_validate(args) -> int:
    resource = parse_resource(Path(args.file).read_bytes())
    if args.schemas:
        from .schema import load_schemas

        files = {
            p.name: p.read_bytes() for p in sorted(Path(args.schemas).glob("*.schema.yaml"))
        }
        registry = load_schemas(files)
    else:
        handle = _open_handle(args, role_required=False)
        registry = load_registry(handle)
    report = validate_resource(resource, registry)
    document = {
        "resource": resource.ref,
        "valid": report.ok,
        "violations": [
            {"path": v.path, "code": v.code, "detail": v.detail} for v in report.violations
        ],
    }
    if report.ok:
        _emit(args, document, f"{resource.ref}: valid")
        return EXIT_OK
    _emit(
        args,
        document,
        f"{resource.ref}: invalid\n" + "\n".join(f"  {v.render()}" for v in report.violations),
    )
    return EXIT_VALIDATION


def _desired_from_file(path: Path, auto_archive: bool) -> DesiredResource:
    resource = parse_resource(path.read_bytes())
    if resource.status is not None:
        resource = resource.with_status(None)
    return DesiredResource(resource, auto_archive=auto_archive)


def _cmd_producer_apply(args) -> int:
    handle = _open_handle(args)
    if handle.identity.role is not Role.PRODUCER:
        raise CliError("producer apply requires --role producer")
    desired = DesiredSet((_desired_from_file(Path(args.file), args.auto_archive),))
    report = producer_reconcile_once(handle, desired)
    _print_report(args, report)
    return EXIT_OK


def _desired_from_dir(directory: Path, auto_archive: bool) -> DesiredSet:
    entries = tuple(
        _desired_from_file(p, auto_archive) for p in sorted(directory.glob("*.yaml"))
    )
    return DesiredSet(entries)


def _loop_config(args, handle) -> LoopConfig:
    interval = float(_setting(args, "interval") or 60.0)
    stop = threading.Event()

    def _stop_handler(_signum, _frame):
        stop.set()

    signal.signal(signal.SIGINT, _stop_handler)
    signal.signal(signal.SIGTERM, _stop_handler)
    return LoopConfig(interval=interval, max_cycles=args.max_cycles, stop_event=stop)


def _cmd_producer_watch(args) -> int:
    handle = _open_handle(args)
    if handle.identity.role is not Role.PRODUCER:
        raise CliError("producer watch requires --role producer")
    directory = Path(args.file)
    if not directory.is_dir():
        raise CliError(f"{directory} is not a directory of desired resources")
    config = _loop_config(args, handle)
    run_loop(
        handle,
        config,
        lambda: producer_reconcile_once(
            handle, _desired_from_dir(directory, args.auto_archive)
        ),
        on_report=lambda report: _print_report(args, report),
    )
    return EXIT_OK


def _cmd_consumer_run(args) -> int:
    handle = _open_handle(args)
    if handle.identity.role is not Role.CONSUMER:
        raise CliError("consumer run requires --role consumer")
    handler = ExternalHandler(args.handler, timeout=args.handler_timeout)
    interval = float(_setting(args, "interval") or 60.0)
    stale_after = timedelta(seconds=10 * interval)
    config = _loop_config(args, handle)
    namespaces = args.namespace or None
    kinds = args.kind or None
    run_loop(
        handle,
        config,
        lambda: consumer_reconcile_once(
            handle, handler, namespaces=namespaces, kinds=kinds, stale_after=stale_after
        ),
        on_report=lambda report: _print_report(args, report),
    )
    return EXIT_OK


def _cmd_pipeline_run(args) -> int:
    handle = _open_handle(args)
    if handle.identity.role is not Role.PRODUCER:
        raise CliError("pipeline run requires --role producer (pipelines write specs)")
    bindings_path = Path(args.file) if args.file else handle.root / PIPELINES_FILE
    if not bindings_path.is_file():
        raise CliError(f"bindings file {bindings_path} not found")
    bindings = parse_bindings(bindings_path.read_bytes(), load_registry(handle))
    config = _loop_config(args, handle)
    run_loop(
        handle,
        config,
        lambda: pipeline_reconcile_once(handle, bindings),
        on_report=lambda report: _print_report(args, report),
    )
    return EXIT_OK


def _cmd_status(args) -> int:
    handle = _open_handle(args, role_required=False)
    try:
        fetch(handle)
    except RemoteUnavailable:
        pass  # report the last known state
    resource = read_resource(handle, args.ref)
    if resource is None:
        print(f"{args.ref}: not found", file=sys.stderr)
        return EXIT_USAGE
    status = resource.status
    document = {
        "resource": resource.ref,
        "generation": resource.metadata.generation,
        "phase": status.phase.value if status else None,
        "observedGeneration": status.observed_generation if status else None,
        "message": status.message if status else None,
        "updatedAt": format_timestamp(status.updated_at)
        if status and status.updated_at
        else None,
    }
    human = (
        f"resource:    {resource.ref}\n"
        f"generation:  {resource.metadata.generation}\n"
        f"phase:       {document['phase'] or 'absent'}\n"
        f"observed:    {document['observedGeneration']}\n"
        f"message:     {document['message'] or '-'}\n"
        f"updated:     {document['updatedAt'] or '-'}"
    )
    _emit(args, document, human)
    return EXIT_OK


def _cmd_history(args) -> int:
    handle = _open_handle(args, role_required=False)
    records = history(handle, args.ref)
    if _output_mode(args) == "json":
        print(
            json.dumps(
                [
                    {
                        "commit": r.commit_id,
                        "author": r.author_email,
                        "role": r.role,
                        "verb": r.verb,
                        "generation": r.generation,
                        "foreign": r.foreign,
                        "at": format_timestamp(r.timestamp),
                        "change": r.change_class.kind.value if r.change_class else None,
                    }
                    for r in records
                ],
                sort_keys=True,
            )
        )
        return EXIT_OK
    for r in records:
        flag = " [foreign]" if r.foreign else ""
        change = r.change_class.kind.value if r.change_class else "-"
        print(
            f"{r.commit_id[:10]}  {format_timestamp(r.timestamp)}  "
            f"{(r.role or '-'):9} {(r.verb or '-'):8} gen={r.generation or '-':<3} "
            f"{change:12} {r.author_email}{flag}"
        )
    return EXIT_OK


def _cmd_audit(args) -> int:
    handle = _open_handle(args, role_required=False)
    findings = audit_repo(handle, load_policy(handle))
    if _output_mode(args) == "json":
        for finding in findings:
            print(json.dumps(finding.to_dict(), sort_keys=True))
    else:
        if not findings:
            print("audit clean: no findings")
        for finding in findings:
            print(
                f"{finding.severity.upper():9} {finding.code:24} {finding.commit_id[:10]} "
                f"{finding.detail}"
            )
    has_violations = any(f.severity == "violation" for f in findings)
    return EXIT_FINDING if has_violations else EXIT_OK


def _cmd_replay(args) -> int:
    handle = _open_handle(args, role_required=False)
    result = replay_history(handle)
    if _output_mode(args) == "json":
        print(json.dumps(result.to_dict(), sort_keys=True))
    else:
        if result.clean:
            print(f"replay clean: {len(result.matches)} paths match history")
        for path, reason in result.mismatches.items():
            print(f"MISMATCH {path}: {reason}")
    return EXIT_OK if result.clean else EXIT_FINDING


def _cmd_archive(args) -> int:
    handle = _open_handle(args)
    if handle.identity.role is not Role.PRODUCER:
        raise CliError("archive requires --role producer")
    fetch(handle)
    resource = read_resource(handle, args.ref)
    if resource is None:
        print(f"{args.ref}: not found", file=sys.stderr)
        return EXIT_USAGE
    record = archive_resource(handle, resource)
    push_with_retry(handle)
    _emit(
        args,
        {"archived": args.ref, "commit": record.commit_id},
        f"archived {args.ref} in {record.commit_id[:10]}",
    )
    return EXIT_OK


def _cmd_sim_run(args) -> int:
    scenario = load_scenario(args.file)
    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="giter-sim-"))
    try:
        trace = run_scenario(scenario, workdir)
    except AssertionFailure as exc:
        trace = exc.trace
        if trace is not None:
            if _output_mode(args) == "json":
                sys.stdout.write(trace.to_json_lines())
            else:
                print(trace.summary())
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    if _output_mode(args) == "json":
        sys.stdout.write(trace.to_json_lines())
    else:
        print(trace.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="giter",
        description="Declarative resource exchange over a shared Git repository.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--repo", help="path to the working clone (env GITER_REPO)")
    common.add_argument("--branch", help="branch name (env GITER_BRANCH, default main)")
    common.add_argument("--email", help="identity email (env GITER_IDENTITY_EMAIL)")
    common.add_argument("--name", help="identity display name (env GITER_IDENTITY_NAME)")
    common.add_argument(
        "--role", choices=[r.value for r in Role], help="actor role (env GITER_ROLE)"
    )
    common.add_argument(
        "--output", choices=["human", "json"], default=None, help="output mode"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="initialize a repository layout")
    p.add_argument("path")
    p.add_argument("--bare", action="store_true", help="create the shared bare remote")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("validate", parents=[common], help="validate a resource document")
    p.add_argument("file")
    p.add_argument("--schemas", help="directory of *.schema.yaml files (default: repo)")
    p.set_defaults(func=_cmd_validate)

    producer = sub.add_parser("producer", help="producer-side commands").add_subparsers(
        dest="subcommand", required=True
    )
    p = producer.add_parser("apply", parents=[common], help="reconcile one desired resource")
    p.add_argument("-f", "--file", required=True)
    p.add_argument("--auto-archive", action="store_true")
    p.set_defaults(func=_cmd_producer_apply)
    p = producer.add_parser("watch", parents=[common], help="reconcile a directory in a loop")
    p.add_argument("-f", "--file", required=True, help="directory of desired documents")
    p.add_argument("--interval", type=float, help="poll interval seconds (env GITER_INTERVAL)")
    p.add_argument("--max-cycles", type=int, default=None)
    p.add_argument("--auto-archive", action="store_true")
    p.set_defaults(func=_cmd_producer_watch)

    consumer = sub.add_parser("consumer", help="consumer-side commands").add_subparsers(
        dest="subcommand", required=True
    )
    p = consumer.add_parser("run", parents=[common], help="run the consumer loop")
    p.add_argument("--handler", required=True, help="handler command (JSON stdin/stdout)")
    p.add_argument("--handler-timeout", type=float, default=60.0)
    p.add_argument("--interval", type=float, help="poll interval seconds (env GITER_INTERVAL)")
    p.add_argument("--max-cycles", type=int, default=None)
    p.add_argument("--namespace", action="append", help="restrict to namespace (repeatable)")
    p.add_argument("--kind", action="append", help="restrict to kind (repeatable)")
    p.set_defaults(func=_cmd_consumer_run)

    pipeline = sub.add_parser("pipeline", help="pipeline commands").add_subparsers(
        dest="subcommand", required=True
    )
    p = pipeline.add_parser("run", parents=[common], help="run the pipeline loop")
    p.add_argument("-f", "--file", help=f"bindings file (default {PIPELINES_FILE})")
    p.add_argument("--interval", type=float, help="poll interval seconds")
    p.add_argument("--max-cycles", type=int, default=None)
    p.set_defaults(func=_cmd_pipeline_run)

    p = sub.add_parser("status", parents=[common], help="show a resource's status")
    p.add_argument("ref", help="<namespace>/<kind>/<name>")
    p.set_defaults(func=_cmd_status)

    p = sub.add_parser("history", parents=[common], help="show a resource's commit history")
    p.add_argument("ref", help="<namespace>/<kind>/<name>")
    p.set_defaults(func=_cmd_history)

    p = sub.add_parser("audit", parents=[common], help="check history against the contract")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("replay", parents=[common], help="rebuild state from history and compare")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("archive", parents=[common], help="archive a terminal resource")
    p.add_argument("ref", help="<namespace>/<kind>/<name>")
    p.set_defaults(func=_cmd_archive)

    sim = sub.add_parser("sim", help="simulation commands").add_subparsers(
        dest="subcommand", required=True
    )
    p = sim.add_parser("run", parents=[common], help="run a scenario file")
    p.add_argument("-f", "--file", required=True)
    p.add_argument("--workdir", help="scenario working directory (default: temp)")
    p.set_defaults(func=_cmd_sim_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValidationFailed as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OwnershipViolation, NotTerminal) as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except (PushExhausted, RemoteUnavailable, MergeConflict) as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ScenarioError, IdentifierError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GiterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
