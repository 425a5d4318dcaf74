from __future__ import annotations

import pytest

from looplab.errors import SessionDead, SpawnError
from looplab.session import (
    ManagedSession,
    SessionConfig,
    SessionState,
    screen_readonly,
    start_session,
)


@pytest.fixture
def session(tmp_path):
    cfg = SessionConfig(working_dir=tmp_path, default_timeout=20.0, handshake_timeout=30.0)
    s = start_session(cfg)
    yield s
    s.kill()


def test_start_session_idle(session):
    assert session.state is SessionState.IDLE


def test_nonexistent_command_spawn_error(tmp_path):
    cfg = SessionConfig(interpreter_command="definitely-not-a-real-binary {child}", working_dir=tmp_path)
    with pytest.raises(SpawnError):
        start_session(cfg)


def test_handshake_smoke(session):
    result = session.exec_fragment("print('ok')")
    assert result.exit_ok
    assert result.stdout.strip() == "ok"


def test_fragments_share_namespace(session):
    session.exec_fragment("x = 41")
    result = session.exec_fragment("print(x + 1)")
    assert result.exit_ok
    assert result.stdout.strip() == "42"


def test_exception_reports_traceback_and_state_survives(session):
    session.exec_fragment("kept = 'alive'")
    failed = session.exec_fragment("raise ValueError('boom')")
    assert not failed.exit_ok
    assert "ValueError: boom" in failed.stderr
    after = session.exec_fragment("print(kept)")
    assert after.exit_ok
    assert after.stdout.strip() == "alive"


def test_timeout_kills_session(session):
    result = session.exec_fragment("import time; time.sleep(30)", timeout=0.5)
    assert result.timed_out
    assert not result.exit_ok
    assert session.state is SessionState.DEAD
    with pytest.raises(SessionDead):
        session.exec_fragment("print(1)")


def test_fragment_log_order(session):
    for i in range(3):
        session.exec_fragment(f"print({i})")
    assert [r.fragment_index for r in session.fragment_log] == [0, 1, 2]
    assert [r.stdout.strip() for r in session.fragment_log] == ["0", "1", "2"]


def test_stale_sentinel_does_not_forge_frame(session):
    first = session.exec_fragment("token = 'seed'")
    stale = session.last_sentinel
    # print a full stale end-marker line; capture must not cut off there
    result = session.exec_fragment(
        f"print('{stale} OK')\nprint('real tail')"
    )
    assert result.exit_ok
    assert "real tail" in result.stdout
    assert f"{stale} OK" in result.stdout
    assert first.exit_ok


def test_sentinels_unique_per_fragment(session):
    session.exec_fragment("pass")
    a = session.last_sentinel
    session.exec_fragment("pass")
    b = session.last_sentinel
    assert a != b and len(a) >= 32


def test_truncation_keeps_tail(tmp_path):
    cfg = SessionConfig(working_dir=tmp_path, truncate_chars=100, handshake_timeout=30.0)
    s = start_session(cfg)
    try:
        result = s.exec_fragment("print('x' * 500 + 'THE-END')")
        assert result.stdout_truncated
        assert len(result.stdout) == 100
        assert result.stdout.endswith("THE-END\n") or result.stdout.endswith("THE-END")
    finally:
        s.kill()


def test_full_stdout_persisted_to_log(tmp_path):
    log_path = tmp_path / "run_stdout.log"
    cfg = SessionConfig(
        working_dir=tmp_path, truncate_chars=50, stdout_log=log_path, handshake_timeout=30.0
    )
    s = start_session(cfg)
    try:
        s.exec_fragment("print('A' * 200)")
        s.exec_fragment("print('second fragment line')")
    finally:
        s.kill()
    logged = log_path.read_text()
    assert "A" * 200 in logged
    assert "second fragment line" in logged


def test_working_dir_is_cwd(tmp_path):
    cfg = SessionConfig(working_dir=tmp_path, handshake_timeout=30.0)
    s = start_session(cfg)
    try:
        s.exec_fragment("open('made_here.txt', 'w').write('hi')")
    finally:
        s.kill()
    assert (tmp_path / "made_here.txt").read_text() == "hi"


# -- managed session -----------------------------------------------------------------


def test_replay_on_restart(tmp_path):
    cfg = SessionConfig(working_dir=tmp_path, default_timeout=20.0, handshake_timeout=30.0)
    ms = ManagedSession(cfg)
    try:
        first = ms.run("y = 7")
        assert first.exit_ok
        ms.commit("y = 7")
        dead = ms.run("import time; time.sleep(30)", timeout=0.5)
        assert dead.timed_out
        revived = ms.run("print(y * 3)")
        assert revived.exit_ok
        assert revived.stdout.strip() == "21"
    finally:
        ms.close()


def test_uncommitted_state_lost_after_death(tmp_path):
    cfg = SessionConfig(working_dir=tmp_path, default_timeout=20.0, handshake_timeout=30.0)
    ms = ManagedSession(cfg)
    try:
        ms.run("ghost = 1")  # not committed
        ms.run("import time; time.sleep(30)", timeout=0.5)
        result = ms.run("print(ghost)")
        assert not result.exit_ok
        assert "NameError" in result.stderr
    finally:
        ms.close()


# -- read-only screen ------------------------------------------------------------------


def test_screen_flags_network_import():
    result = screen_readonly("import requests")
    assert not result.ok
    assert "requests" in result.violations


def test_screen_passes_benign_code():
    assert screen_readonly("import pandas as pd\npd.read_csv('x.csv')").ok


def test_screen_flags_system_calls():
    result = screen_readonly("os.system('rm -rf /tmp/x')")
    assert not result.ok
    assert "os.system" in result.violations


def test_screen_custom_denylist():
    result = screen_readonly("shutil.rmtree(p)", denylist=("shutil.rmtree",))
    assert result.violations == ("shutil.rmtree",)
