import { z } from "zod";

export const PROTO_VERSION = 1;
export const STDERR_TAIL_LIMIT = 4096;

export const RunRequestSchema = z.object({
  proto: z.literal(PROTO_VERSION),
  solution_code: z.string().min(1),
  test_code: z.string().min(1),
  timeout_s: z.number().positive().default(30),
  memory_mb: z.number().int().positive().default(1024),
});

export type RunRequest = z.infer<typeof RunRequestSchema>;

export type RunStatus =
  | "passed"
  | "failed"
  | "timeout"
  | "crash"
  | "collection_error";

export interface RunReport {
  proto: typeof PROTO_VERSION;
  status: RunStatus;
  tests_passed: number;
  tests_failed: number;
  tests_collected: number;
  branch_coverage: number;
  stderr_tail: string;
  duration_ms: number;
}

export function makeReport(
  status: RunStatus,
  fields: Partial<Omit<RunReport, "proto" | "status">> = {},
): RunReport {
  return {
    proto: PROTO_VERSION,
    status,
    tests_passed: fields.tests_passed ?? 0,
    tests_failed: fields.tests_failed ?? 0,
    tests_collected: fields.tests_collected ?? 0,
    branch_coverage: fields.branch_coverage ?? 0,
    stderr_tail: truncateTail(fields.stderr_tail ?? ""),
    duration_ms: fields.duration_ms ?? 0,
  };
}

export function truncateTail(text: string): string {
  const bytes = Buffer.from(text, "utf-8");
  if (bytes.length <= STDERR_TAIL_LIMIT) {
    return text;
  }
  return bytes.subarray(bytes.length - STDERR_TAIL_LIMIT).toString("utf-8");
}
