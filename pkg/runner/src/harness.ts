import { spawn } from "node:child_process";
import { mkdtemp, rm, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { makeReport, RunReport, RunRequest, truncateTail } from "./protocol.js";

const HARNESS_MARKER = "TFRUNNER//";
const OUTPUT_CAP_BYTES = 1024 * 1024;
const WORKSPACE_PREFIX = "runner-workspace-";

// Network access is disabled by environment sanitization plus a socket
// blocker injected through sitecustomize; the child sees only a minimal env.
// The blocker stays a socket subclass so stdlib modules that subclass
// socket.socket (ssl) still import; only instantiation is refused.
const SITECUSTOMIZE = `import socket


class _BlockedSocket(socket.socket):
    def __init__(self, *args, **kwargs):
        raise OSError("network access is disabled in the execution sandbox")


def _blocked(*args, **kwargs):
    raise OSError("network access is disabled in the execution sandbox")


socket.socket = _BlockedSocket
socket.socketpair = _blocked
socket.create_connection = _blocked
`;

interface HarnessResult {
  harness: number;
  pytest_exit: number;
  collected: number;
  passed: number;
  failed: number;
  collection_failed: boolean;
  branches_total: number;
  branches_covered: number;
}

function harnessPath(): string {
  return join(dirname(fileURLToPath(import.meta.url)), "pytest_harness.py");
}

function pythonBinary(): string {
  return process.env.PYTHON ?? "python3";
}

interface ChildOutcome {
  exitCode: number | null;
  signal: NodeJS.Signals | null;
  timedOut: boolean;
  stdout: string;
  stderr: string;
}

function runChild(
  workspace: string,
  request: RunRequest,
): Promise<ChildOutcome> {
  const memoryKb = request.memory_mb * 1024;
  // ulimit bounds the address space of everything in the exec'd process;
  // detached spawn gives us a process group we can kill as a unit on timeout.
  const script = `ulimit -v ${memoryKb} 2>/dev/null; exec "$0" -B "$1"`;
  const child = spawn("bash", ["-c", script, pythonBinary(), harnessPath()], {
    cwd: workspace,
    detached: true,
    stdio: ["ignore", "pipe", "pipe"],
    env: {
      PATH: "/usr/local/bin:/usr/bin:/bin",
      HOME: workspace,
      LANG: "C.UTF-8",
      LC_ALL: "C.UTF-8",
      PYTHONPATH: workspace,
      PYTHONDONTWRITEBYTECODE: "1",
      PYTHONHASHSEED: "0",
      // hermetic pytest: core plugins only, no environment-dependent autoload
      PYTEST_DISABLE_PLUGIN_AUTOLOAD: "1",
    },
  });

  let stdout = "";
  let stderr = "";
  let timedOut = false;

  child.stdout.on("data", (chunk: Buffer) => {
    if (stdout.length < OUTPUT_CAP_BYTES) stdout += chunk.toString("utf-8");
  });
  child.stderr.on("data", (chunk: Buffer) => {
    if (stderr.length < OUTPUT_CAP_BYTES) stderr += chunk.toString("utf-8");
  });

  const killGroup = () => {
    if (child.pid !== undefined) {
      try {
        process.kill(-child.pid, "SIGKILL");
      } catch {
        // group already gone
      }
    }
  };

  return new Promise((resolve, reject) => {
    const timer = setTimeout(() => {
      timedOut = true;
      killGroup();
    }, request.timeout_s * 1000);

    child.on("error", (err) => {
      clearTimeout(timer);
      reject(err);
    });
    child.on("close", (exitCode, signal) => {
      clearTimeout(timer);
      killGroup(); // reap any stragglers in the group
      resolve({ exitCode, signal, timedOut, stdout, stderr });
    });
  });
}

function parseHarnessLine(stdout: string): HarnessResult | null {
  const lines = stdout.split("\n");
  for (let i = lines.length - 1; i >= 0; i--) {
    if (lines[i].startsWith(HARNESS_MARKER)) {
      try {
        return JSON.parse(lines[i].slice(HARNESS_MARKER.length)) as HarnessResult;
      } catch {
        return null;
      }
    }
  }
  return null;
}

function coverageFrom(result: HarnessResult, passed: boolean): number {
  if (result.branches_total === 0) {
    // zero-branch solutions are vacuously fully covered when tests pass
    return passed ? 1.0 : 0.0;
  }
  return result.branches_covered / result.branches_total;
}

export async function executeRun(request: RunRequest): Promise<RunReport> {
  const workspace = await mkdtemp(join(tmpdir(), WORKSPACE_PREFIX));
  const started = Date.now();
  try {
    await writeFile(join(workspace, "solution.py"), request.solution_code, "utf-8");
    await writeFile(join(workspace, "test_solution.py"), request.test_code, "utf-8");
    await writeFile(join(workspace, "sitecustomize.py"), SITECUSTOMIZE, "utf-8");

    const outcome = await runChild(workspace, request);
    const duration_ms = Date.now() - started;

    if (outcome.timedOut) {
      return makeReport("timeout", {
        duration_ms,
        stderr_tail: truncateTail(outcome.stderr),
      });
    }

    const result = parseHarnessLine(outcome.stdout);
    if (outcome.exitCode !== 0 || result === null || result.harness !== 1) {
      return makeReport("crash", {
        duration_ms,
        stderr_tail: truncateTail(outcome.stderr || outcome.stdout),
      });
    }

    if (result.pytest_exit === 0 && result.collected > 0) {
      return makeReport("passed", {
        tests_passed: result.passed,
        tests_failed: 0,
        tests_collected: result.collected,
        branch_coverage: coverageFrom(result, true),
        duration_ms,
      });
    }
    if (result.pytest_exit === 1 && !result.collection_failed) {
      return makeReport("failed", {
        tests_passed: result.passed,
        tests_failed: result.failed,
        tests_collected: result.collected,
        branch_coverage: coverageFrom(result, false),
        duration_ms,
      });
    }
    // interrupted / usage error / internal error / nothing collected
    return makeReport("collection_error", {
      tests_collected: result.collected,
      stderr_tail: truncateTail(outcome.stderr || outcome.stdout),
      duration_ms,
    });
  } finally {
    await rm(workspace, { recursive: true, force: true });
  }
}
