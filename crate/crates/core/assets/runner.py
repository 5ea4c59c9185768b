"""Runs one test case against generated code and prints a JSON verdict.

usage: runner.py CODE_FILE TEST_FILE TEST_ID TIMEOUT_MS MEMORY_MB
exit status: 0 pass, 1 fail, 2 error
"""

import json
import sys
import time


def limit_resources(timeout_ms, memory_mb):
    try:
        import resource

        if memory_mb > 0:
            cap = memory_mb * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (cap, cap))
        secs = max(1, -(-timeout_ms // 1000) + 1)
        resource.setrlimit(resource.RLIMIT_CPU, (secs, secs))
    except (ImportError, ValueError, OSError):
        pass


def block_network():
    import socket

    def refuse(*_args, **_kwargs):
        raise OSError("network access is disabled in the sandbox")

    socket.socket = refuse
    socket.create_connection = refuse
    socket.getaddrinfo = refuse


def main():
    code_file, test_file, test_id = sys.argv[1], sys.argv[2], sys.argv[3]
    timeout_ms, memory_mb = int(sys.argv[4]), int(sys.argv[5])
    with open(code_file, encoding="utf-8") as f:
        code = f.read()
    with open(test_file, encoding="utf-8") as f:
        test = f.read()

    limit_resources(timeout_ms, memory_mb)
    block_network()

    start = time.perf_counter()
    namespace = {"__name__": "__solution__"}
    outcome, status = "pass", 0
    try:
        exec(compile(code, "solution.py", "exec"), namespace)
        exec(compile(test, "test.py", "exec"), namespace)
    except AssertionError:
        outcome, status = "fail", 1
    except BaseException:
        outcome, status = "error", 2
    millis = (time.perf_counter() - start) * 1000.0

    sys.stdout.write(json.dumps({"test_id": test_id, "outcome": outcome, "millis": millis}) + "\n")
    sys.stdout.flush()
    sys.exit(status)


if __name__ == "__main__":
    main()
