"""Guest side of the code-execution tool.

Runs as ``python -E -c <this source> <sandbox_root>``. Reads one JSON request
per line on stdin ({"code": ...}) and answers with one JSON line
({"output": ..., "error": bool}) on the original stdout. Globals persist
between requests, like notebook cells. An audit hook refuses writes outside
the sandbox, process spawning and network sockets.
"""

import ast
import io
import json
import os
import sys
import traceback

ROOT = os.path.realpath(sys.argv[1])
sys.dont_write_bytecode = True
os.chdir(ROOT)

_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
_PATH_EVENTS = {
    "os.remove": 1,
    "os.rmdir": 1,
    "os.mkdir": 1,
    "os.rename": 2,
    "os.replace": 2,
    "os.symlink": 2,
    "os.link": 2,
    "os.truncate": 1,
    "os.chmod": 1,
    "os.chown": 1,
    "os.utime": 1,
    "shutil.rmtree": 1,
    "shutil.copyfile": 2,
    "shutil.move": 2,
}
_BLOCKED_PREFIXES = ("subprocess.", "os.exec", "os.spawn", "os.posix_spawn", "os.fork", "pty.spawn")
_BLOCKED = {"os.system", "os.forkpty", "os.kill", "os.killpg", "socket.connect", "socket.bind", "socket.getaddrinfo", "socket.sendto"}


def _inside(path):
    if isinstance(path, int):
        return True
    try:
        real = os.path.realpath(os.fsdecode(path))
    except (TypeError, ValueError):
        return False
    return real == ROOT or real.startswith(ROOT + os.sep)


def _audit(event, args):
    if event == "open":
        path, mode, flags = args
        writing = bool(flags & _WRITE_FLAGS) if isinstance(flags, int) else False
        if isinstance(mode, str) and any(c in mode for c in "wax+"):
            writing = True
        if writing and path is not None and not _inside(path):
            raise PermissionError(f"writing outside /mnt/data is not allowed: {path}")
    elif event in _PATH_EVENTS:
        for path in args[: _PATH_EVENTS[event]]:
            if path is not None and not _inside(path):
                raise PermissionError(f"{event} outside /mnt/data is not allowed: {path}")
    elif event in _BLOCKED or event.startswith(_BLOCKED_PREFIXES):
        raise PermissionError(f"{event} is disabled in this sandbox")


def _run(code, env):
    buf = io.StringIO()
    saved = sys.stdout, sys.stderr
    sys.stdout = sys.stderr = buf
    error = False
    try:
        tree = ast.parse(code, "<cell>", "exec")
        tail = None
        if tree.body and isinstance(tree.body[-1], ast.Expr):
            tail = ast.Expression(tree.body.pop().value)
        exec(compile(tree, "<cell>", "exec"), env)
        if tail is not None:
            value = eval(compile(tail, "<cell>", "eval"), env)
            if value is not None:
                print(repr(value))
    except BaseException:  # noqa: BLE001 - every failure is reported to the caller
        error = True
        etype, evalue, tb = sys.exc_info()
        # drop the frames that belong to this runner
        while tb is not None and tb.tb_frame.f_code.co_filename != "<cell>":
            tb = tb.tb_next
        buf.write("".join(traceback.format_exception(etype, evalue, tb)))
    finally:
        sys.stdout, sys.stderr = saved
    return buf.getvalue(), error


def main():
    proto = os.fdopen(os.dup(1), "w", encoding="utf-8")
    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, 1)
    os.dup2(devnull, 2)
    stdin = sys.stdin
    # cells must not read the protocol stream
    sys.stdin = io.StringIO("")
    env = {"__name__": "__main__"}
    sys.addaudithook(_audit)
    proto.write(json.dumps({"ready": True}) + "\n")
    proto.flush()
    for line in stdin:
        request = json.loads(line)
        output, error = _run(request["code"], env)
        proto.write(json.dumps({"output": output, "error": error}) + "\n")
        proto.flush()


main()
