"""Thin wrappers around the git binary.

Every invocation is hermetic: global/system config is masked, signing is off,
and author/committer identity and dates come in through the environment so
commit ids are a pure function of content, message, identity and clock.
"""

from __future__ import annotations

import os
import subprocess
from datetime import datetime
from pathlib import Path

from .clock import ensure_utc
from .errors import GitError

_BASE_ENV = {
    "GIT_CONFIG_GLOBAL": os.devnull,
    "GIT_CONFIG_SYSTEM": os.devnull,
    "GIT_TERMINAL_PROMPT": "0",
    "LC_ALL": "C",
}


def run_git(
    cwd: Path | str,
    *args: str,
    env: dict[str, str] | None = None,
    input_bytes: bytes | None = None,
    check: bool = True,
) -> subprocess.CompletedProcess:
    merged = os.environ.copy()
    merged.update(_BASE_ENV)
    if env:
        merged.update(env)
    command = ["git", "-c", "commit.gpgsign=false", "-c", "gc.auto=0", *args]
    result = subprocess.run(
        command, cwd=str(cwd), env=merged, input=input_bytes, capture_output=True
    )
    if check and result.returncode != 0:
        stderr = result.stderr.decode("utf-8", "replace").strip()
        raise GitError(f"git {' '.join(args[:2])} failed: {stderr}", stderr=stderr)
    return result


def git_out(cwd: Path | str, *args: str, **kwargs) -> str:
    return run_git(cwd, *args, **kwargs).stdout.decode("utf-8", "replace").strip()


def identity_env(name: str, email: str, when: datetime) -> dict[str, str]:
    stamp = f"{int(ensure_utc(when).timestamp())} +0000"
    return {
        "GIT_AUTHOR_NAME": name,
        "GIT_AUTHOR_EMAIL": email,
        "GIT_AUTHOR_DATE": stamp,
        "GIT_COMMITTER_NAME": name,
        "GIT_COMMITTER_EMAIL": email,
        "GIT_COMMITTER_DATE": stamp,
    }


def rev_parse(cwd: Path | str, ref: str) -> str | None:
    result = run_git(cwd, "rev-parse", "--verify", "--quiet", ref, check=False)
    if result.returncode != 0:
        return None
    return result.stdout.decode().strip()


def merge_base(cwd: Path | str, a: str, b: str) -> str | None:
    result = run_git(cwd, "merge-base", a, b, check=False)
    if result.returncode != 0:
        return None
    return result.stdout.decode().strip()


def is_ancestor(cwd: Path | str, ancestor: str, descendant: str) -> bool:
    result = run_git(cwd, "merge-base", "--is-ancestor", ancestor, descendant, check=False)
    return result.returncode == 0


def show_blob(cwd: Path | str, rev: str, path: str) -> bytes | None:
    """File contents at a revision, or None when absent there."""
    result = run_git(cwd, "show", f"{rev}:{path}", check=False)
    if result.returncode != 0:
        return None
    return result.stdout


def diff_name_status(cwd: Path | str, base: str, target: str) -> list[tuple[str, str]]:
    out = git_out(cwd, "diff", "--no-renames", "--name-status", base, target)
    entries = []
    for line in out.splitlines():
        if not line.strip():
            continue
        status, _, path = line.partition("\t")
        entries.append((status.strip(), path.strip()))
    return entries


def commit_changed_paths(cwd: Path | str, sha: str, parents: list[str]) -> list[tuple[str, str]]:
    """Changed paths of a commit relative to its first parent (or empty tree)."""
    if not parents:
        out = git_out(cwd, "diff-tree", "--no-renames", "--root", "-r", "--name-status", sha)
        lines = out.splitlines()[1:]  # first line echoes the sha
        entries = []
        for line in lines:
            if not line.strip():
                continue
            status, _, path = line.partition("\t")
            entries.append((status.strip(), path.strip()))
        return entries
    return diff_name_status(cwd, parents[0], sha)


def rev_list(cwd: Path | str, ref: str, paths: list[str] | None = None) -> list[str]:
    """Commit ids reachable from ref, oldest first."""
    args = ["rev-list", "--reverse", "--topo-order", ref]
    if paths:
        args += ["--", *paths]
    out = git_out(cwd, *args)
    return [line for line in out.splitlines() if line]


def commit_info(cwd: Path | str, sha: str) -> tuple[list[str], str, str, int, str]:
    """(parents, author_name, author_email, author_time, full_message)."""
    out = run_git(
        cwd, "show", "-s", "--format=%P%x00%an%x00%ae%x00%at%x00%B", sha
    ).stdout.decode("utf-8", "replace")
    parents_raw, name, email, when, message = out.split("\x00", 4)
    parents = parents_raw.split() if parents_raw.strip() else []
    return parents, name, email, int(when), message.rstrip("\n")


def parse_trailers(message: str) -> dict[str, str]:
    """Trailer block of a commit message: trailing `Key: value` paragraph."""
    paragraphs = [p for p in message.split("\n\n") if p.strip()]
    if len(paragraphs) < 2:
        return {}
    lines = paragraphs[-1].splitlines()
    trailers = {}
    for line in lines:
        key, sep, value = line.partition(": ")
        if not sep or not key or " " in key:
            return {}
        trailers[key] = value.strip()
    return trailers
