"""Interpreter child process: evaluates framed code fragments in one
shared namespace.

Frame protocol (see PROTOCOL.md): the parent writes ``BEGIN <sentinel>``,
the fragment lines, then ``END <sentinel>`` on stdin. The child executes
the fragment, then echoes ``<sentinel> OK`` or ``<sentinel> ERR`` on stdout
and the bare sentinel on stderr, each preceded by a guard newline so the
marker always sits on its own line. Any interpreter replacing this one must
speak the same frames.
"""

import sys
import traceback


def main() -> None:
    namespace = {"__name__": "__main__"}
    stdin = sys.stdin
    while True:
        header = stdin.readline()
        if not header:
            break
        header = header.rstrip("\n")
        if not header.startswith("BEGIN "):
            continue
        sentinel = header[len("BEGIN "):].strip()
        end_marker = "END " + sentinel
        lines = []
        while True:
            line = stdin.readline()
            if not line:
                return
            if line.rstrip("\n") == end_marker:
                break
            lines.append(line)
        code = "".join(lines)
        ok = True
        try:
            exec(compile(code, "<fragment>", "exec"), namespace)
        except KeyboardInterrupt:
            raise
        except BaseException:
            ok = False
            traceback.print_exc()
        sys.stdout.flush()
        sys.stderr.flush()
        sys.stdout.write("\n%s %s\n" % (sentinel, "OK" if ok else "ERR"))
        sys.stdout.flush()
        sys.stderr.write("\n%s\n" % sentinel)
        sys.stderr.flush()


if __name__ == "__main__":
    main()
