"""Persistent child-interpreter sessions with shared state across fragments.

A :class:`Session` owns one child process speaking the frame protocol in
``_child.py``; successive fragments see each other's variables. Timeouts
kill the whole session (partial state is untrustworthy), and
:class:`ManagedSession` transparently restarts a dead session and replays
the committed fragments to rebuild state.
"""

from __future__ import annotations

import os
import queue
import secrets
import shlex
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional

from .core import DEFAULT_READONLY_DENYLIST
from .errors import FrameProtocolError, HandshakeTimeout, SessionDead, SpawnError
from ._text import truncate_tail

_CHILD_PATH = Path(__file__).with_name("_child.py")


class SessionState(Enum):
    IDLE = "idle"
    BUSY = "busy"
    DEAD = "dead"


@dataclass(frozen=True)
class ExecResult:
    fragment_index: int
    stdout: str
    stderr: str
    exit_ok: bool
    wall_time: float
    timed_out: bool = False
    stdout_truncated: bool = False
    stderr_truncated: bool = False

    def __post_init__(self) -> None:
        if self.timed_out and self.exit_ok:
            raise ValueError("a timed-out fragment cannot be exit_ok")


@dataclass(frozen=True)
class ScreenResult:
    ok: bool
    violations: tuple[str, ...] = ()


def screen_readonly(code: str, denylist: tuple[str, ...] = DEFAULT_READONLY_DENYLIST) -> ScreenResult:
    """Static substring screen for read-only exploration fragments.

    A pass does NOT guarantee safety; this is a best-effort tripwire, not a
    sandbox. The real constraint lives in the agent prompts.
    """
    matched = tuple(pattern for pattern in denylist if pattern in code)
    return ScreenResult(ok=not matched, violations=matched)


@dataclass
class SessionConfig:
    interpreter_command: str = "{python} -u {child}"
    working_dir: Optional[Path] = None
    env_overrides: Mapping[str, str] = field(default_factory=dict)
    truncate_chars: int = 10000
    default_timeout: float = 600.0
    handshake_timeout: float = 30.0
    stdout_log: Optional[Path] = None


def _reader(pipe, out_queue: "queue.Queue[Optional[str]]") -> None:
    for line in iter(pipe.readline, ""):
        out_queue.put(line)
    out_queue.put(None)


class Session:
    """One child interpreter; fragments execute strictly sequentially."""

    def __init__(self, cfg: SessionConfig) -> None:
        self.cfg = cfg
        self.state = SessionState.DEAD
        self.fragment_log: list[ExecResult] = []
        self._proc: Optional[subprocess.Popen] = None
        self._stdout_q: "queue.Queue[Optional[str]]" = queue.Queue()
        self._stderr_q: "queue.Queue[Optional[str]]" = queue.Queue()
        self.last_sentinel = ""

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        command = self.cfg.interpreter_command.format(
            python=sys.executable, child=str(_CHILD_PATH)
        )
        argv = shlex.split(command)
        env = dict(os.environ)
        env.update(self.cfg.env_overrides)
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=str(self.cfg.working_dir) if self.cfg.working_dir else None,
                env=env,
                text=True,
                bufsize=1,
            )
        except (OSError, ValueError) as exc:
            raise SpawnError(f"cannot start interpreter {argv!r}: {exc}") from None
        self._stdout_q = queue.Queue()
        self._stderr_q = queue.Queue()
        threading.Thread(target=_reader, args=(self._proc.stdout, self._stdout_q), daemon=True).start()
        threading.Thread(target=_reader, args=(self._proc.stderr, self._stderr_q), daemon=True).start()
        self.state = SessionState.IDLE

        result = self._exec("pass", timeout=self.cfg.handshake_timeout, log=False)
        if result.timed_out or not result.exit_ok:
            self.kill()
            raise HandshakeTimeout("interpreter child never answered the handshake")

    def kill(self) -> None:
        self.state = SessionState.DEAD
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass

    # -- execution ---------------------------------------------------------

    def exec_fragment(self, code: str, timeout: Optional[float] = None) -> ExecResult:
        """Run one fragment in the shared namespace and capture its output.

        On timeout the child is killed and the session goes Dead; the caller
        restarts and replays if it wants the state back.
        """
        if self.state is SessionState.DEAD:
            raise SessionDead("session is dead; start a new one")
        if self.state is SessionState.BUSY:
            raise SessionDead("session is busy; fragments must run sequentially")
        return self._exec(code, timeout if timeout is not None else self.cfg.default_timeout)

    def _exec(self, code: str, timeout: float, log: bool = True) -> ExecResult:
        assert self._proc is not None and self._proc.stdin is not None
        self.state = SessionState.BUSY
        sentinel = secrets.token_hex(16)
        while sentinel in code:
            sentinel = secrets.token_hex(16)
        self.last_sentinel = sentinel

        body = code if code.endswith("\n") else code + "\n"
        started = time.monotonic()
        try:
            self._proc.stdin.write(f"BEGIN {sentinel}\n{body}END {sentinel}\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self.kill()
            raise FrameProtocolError("interpreter child closed its stdin pipe") from None

        deadline = started + timeout
        stdout_text, out_marker, out_eof = self._drain(self._stdout_q, sentinel, deadline, stream="stdout")
        if out_marker is None:
            wall = time.monotonic() - started
            self.kill()
            if out_eof:
                raise FrameProtocolError("interpreter child exited before echoing the sentinel")
            return self._finish(code, stdout_text, "", exit_ok=False, wall=wall, timed_out=True, log=log)

        stderr_text, err_marker, err_eof = self._drain(self._stderr_q, sentinel, deadline, stream="stderr")
        wall = time.monotonic() - started
        if err_marker is None:
            self.kill()
            if err_eof:
                raise FrameProtocolError("interpreter child exited before closing stderr frame")
            return self._finish(code, stdout_text, stderr_text, exit_ok=False, wall=wall, timed_out=True, log=log)

        exit_ok = out_marker == "OK"
        return self._finish(code, stdout_text, stderr_text, exit_ok=exit_ok, wall=wall, timed_out=False, log=log)

    def _drain(
        self,
        source: "queue.Queue[Optional[str]]",
        sentinel: str,
        deadline: float,
        stream: str,
    ) -> tuple[str, Optional[str], bool]:
        """Collect lines until the frame marker; (text, marker, saw_eof)."""
        lines: list[str] = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return "".join(lines), None, False
            try:
                line = source.get(timeout=min(remaining, 0.2))
            except queue.Empty:
                continue
            if line is None:
                return "".join(lines), None, True
            stripped = line.rstrip("\n")
            if stream == "stdout" and stripped in (f"{sentinel} OK", f"{sentinel} ERR"):
                text = "".join(lines)
                # the child writes a guard newline before the marker
                if text.endswith("\n"):
                    text = text[:-1]
                return text, stripped.rsplit(" ", 1)[1], False
            if stream == "stderr" and stripped == sentinel:
                text = "".join(lines)
                if text.endswith("\n"):
                    text = text[:-1]
                return text, "END", False
            lines.append(line)

    def _finish(
        self,
        code: str,
        stdout_text: str,
        stderr_text: str,
        exit_ok: bool,
        wall: float,
        timed_out: bool,
        log: bool,
    ) -> ExecResult:
        if self.state is SessionState.BUSY:
            self.state = SessionState.IDLE
        limit = self.cfg.truncate_chars
        result = ExecResult(
            fragment_index=len(self.fragment_log),
            stdout=truncate_tail(stdout_text, limit),
            stderr=truncate_tail(stderr_text, limit),
            exit_ok=exit_ok,
            wall_time=wall,
            timed_out=timed_out,
            stdout_truncated=len(stdout_text) > limit,
            stderr_truncated=len(stderr_text) > limit,
        )
        if log:
            self.fragment_log.append(result)
            if self.cfg.stdout_log is not None:
                self.cfg.stdout_log.parent.mkdir(parents=True, exist_ok=True)
                with self.cfg.stdout_log.open("a", encoding="utf-8") as handle:
                    handle.write(stdout_text)
                    if stdout_text and not stdout_text.endswith("\n"):
                        handle.write("\n")
                    if stderr_text:
                        handle.write(stderr_text)
                        if not stderr_text.endswith("\n"):
                            handle.write("\n")
        return result


def start_session(cfg: SessionConfig) -> Session:
    """Spawn the child interpreter and verify it answers the handshake."""
    session = Session(cfg)
    session.start()
    return session


class ManagedSession:
    """Session wrapper that restarts after death and replays committed state.

    Fragments the caller :meth:`commit`\\ s are re-executed in order whenever
    the underlying session has to be rebuilt, preserving the variable-reuse
    contract across crashes and timeouts.
    """

    def __init__(self, cfg: SessionConfig) -> None:
        self.cfg = cfg
        self.committed: list[str] = []
        self._session: Optional[Session] = None

    @property
    def session(self) -> Optional[Session]:
        return self._session

    def run(self, code: str, timeout: Optional[float] = None) -> ExecResult:
        if self._session is None or self._session.state is SessionState.DEAD:
            self._rebuild()
        assert self._session is not None
        try:
            return self._session.exec_fragment(code, timeout)
        except FrameProtocolError as exc:
            return ExecResult(
                fragment_index=len(self._session.fragment_log),
                stdout="",
                stderr=f"interpreter session aborted: {exc}",
                exit_ok=False,
                wall_time=0.0,
            )

    def commit(self, code: str) -> None:
        self.committed.append(code)

    def close(self) -> None:
        if self._session is not None:
            self._session.kill()
            self._session = None

    def _rebuild(self) -> None:
        self._session = start_session(self.cfg)
        for code in self.committed:
            try:
                self._session.exec_fragment(code, self.cfg.default_timeout)
            except (SessionDead, FrameProtocolError):
                break
