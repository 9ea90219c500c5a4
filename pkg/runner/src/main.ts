import { executeRun } from "./harness.js";
import { RunRequestSchema } from "./protocol.js";

async function readStdin(): Promise<string> {
  const chunks: Buffer[] = [];
  for await (const chunk of process.stdin) {
    chunks.push(chunk as Buffer);
  }
  return Buffer.concat(chunks).toString("utf-8");
}

// Protocol v1: one RunRequest JSON object on stdin, one RunReport JSON
// object on stdout. Exit 0 for any well-formed report (failed and timeout
// included); nonzero only when the runner itself cannot produce one.
async function main(): Promise<number> {
  let raw: string;
  try {
    raw = await readStdin();
  } catch (err) {
    process.stderr.write(`runner error: cannot read stdin: ${err}\n`);
    return 1;
  }
  let request;
  try {
    request = RunRequestSchema.parse(JSON.parse(raw));
  } catch (err) {
    process.stderr.write(`runner error: malformed request: ${err}\n`);
    return 1;
  }
  try {
    const report = await executeRun(request);
    process.stdout.write(JSON.stringify(report) + "\n");
    return 0;
  } catch (err) {
    process.stderr.write(`runner error: ${err}\n`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
