"""Deterministic canned answers for the generative mock backend.

Used when a mock fixture has no scripted entry: the response is a pure
function of (prompt hash, request nonce, sample index) plus the prompt's
own slot contents, never of process-local state. That keeps full mock
pipeline runs byte-identical across machines, and across interrupted and
resumed executions.

The canned corpus intentionally exercises every pipeline path: parse
failures, abstentions, under-covered passes, timeouts, class-based
answers, leaked solutions, and so on, at fixed low rates.
"""

from __future__ import annotations

import hashlib
import random

_PREFILL_SUFFIXES = {
    "Write a function to": [
        " find the maximum and minimum values in a list of integers. I need an O(n) solution.",
        " reverse the words of a sentence while keeping the original spacing between them.",
        " compute the running median of a stream of numbers using two heaps.",
        " flatten an arbitrarily nested list of integers into a single flat list.",
        " count how many times each character appears in a string, ignoring case.",
        " check if two strings are anagrams of each other without sorting.",
        " find the maximum and minimum values in a list of integers. I need an O(n) solution.",
        " merge overlapping intervals given as a list of (start, end) pairs.",
    ],
    "Write a Python function": [
        " that checks whether a given string is a palindrome, ignoring punctuation.",
        " that returns the n-th Fibonacci number using memoization.",
        " that removes duplicates from a list while preserving the original order.",
        " that converts a Roman numeral string into its integer value.",
        " that checks whether a given string is a palindrome, ignoring punctuation.",
        " that computes the dot product of two equal-length vectors.",
        " that groups a list of words by their sorted letter signature.",
        " that finds the longest strictly increasing run in a list of numbers.",
    ],
    "Create a function that": [
        " returns the k most frequent elements of a list, ties broken by value.",
        " validates that a string of brackets is balanced using a stack.",
        " rotates an n-by-n matrix 90 degrees clockwise in place.",
        " returns the k most frequent elements of a list, ties broken by value.",
        " computes the edit distance between two strings with dynamic programming.",
        " splits a list into chunks of a given size, padding the last chunk with None.",
        " finds the single number that appears once when every other appears twice.",
        " builds a frequency histogram of word lengths in a paragraph.",
    ],
}

_ASSESSMENT_TASKS = [
    "Given an array of integers and a target value, write a function that returns the indices of the two numbers that add up to the target. Each input has exactly one solution and you may not use the same element twice.",
    "Write a function that receives a list of meeting intervals and returns the minimum number of rooms required so that no two overlapping meetings share a room.",
    "Implement a function that takes a string of digits and returns all possible letter combinations the digits could represent on a classic phone keypad.",
    "Given a grid of 0s and 1s, write a function that counts the number of connected islands of 1s, where connectivity is horizontal and vertical only.",
    "Write a function that determines whether a sequence of course prerequisites can be completed, given the total number of courses and a list of prerequisite pairs.",
    "Implement a function that finds the length of the longest substring without repeating characters in a given string.",
    "Given a list of stock prices by day, write a function that computes the maximum profit achievable with at most one buy and one sell.",
    "Write a function that merges k sorted linked lists, given as Python lists, into one sorted list in O(n log k) time.",
    "Implement a function that returns the minimal window of one string that contains every character of a second string, or an empty string if none exists.",
    "Given a non-negative integer array representing jump lengths, write a function that decides whether the last index is reachable from the first.",
]

_DSA_TASKS = [
    "Implement a function that performs an iterative in-order traversal of a binary search tree supplied as nested tuples and returns the visited values in order.",
    "Write a function that detects whether a directed graph, given as an adjacency list, contains a cycle, returning one example cycle when it does.",
    "Implement a union-find structure with path compression and use it to count connected components in an undirected graph.",
    "Write a function that returns the shortest path between two nodes of an unweighted graph using breadth-first search.",
    "Implement a binary min-heap supporting push, pop and peek, and use it to sort a list of integers.",
    "Write a function that builds a trie from a list of words and answers prefix-count queries against it.",
]

_DOC_TASKS = [
    "loads a tabular dataset, groups rows by one column and returns the mean of another column per group",
    "registers two routes that share state through an application-level cache and returns JSON responses",
    "fits the estimator on a training split, then reports accuracy on a held-out split",
    "builds a small figure with two labelled series and returns the underlying axes object",
]

_SOLUTION_BODIES = [
    "def solve(values):\n    best = None\n    for v in values:\n        if best is None or v > best:\n            best = v\n    return best\n",
    "def solve(items):\n    seen = set()\n    out = []\n    for x in items:\n        if x not in seen:\n            seen.add(x)\n            out.append(x)\n    return out\n",
    "def solve(text):\n    total = 0\n    for ch in text:\n        if ch.isupper():\n            total += 1\n    return total\n",
    "def solve(nums):\n    acc = 0\n    for n in nums:\n        acc += n\n    return acc\n",
]

_THINK_SENTENCES = [
    "First I restate the problem in my own words and identify the inputs and outputs.",
    "A brute force approach would enumerate every candidate, which is too slow here.",
    "Sorting the input first makes the invariant easier to maintain.",
    "I should double check the empty input and single element cases.",
    "Let me trace the algorithm on a small example to confirm the indices line up.",
    "The accumulator must be initialized before the loop, otherwise the first element is dropped.",
    "Complexity is linear in the input size with constant extra space.",
    "Re-reading the statement, the tie-breaking rule matters for the final ordering.",
]


def stable_int(*parts: str) -> int:
    digest = hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


def _rng(*parts: str) -> random.Random:
    return random.Random(stable_int(*parts))


def canned_embedding(text: str, dim: int) -> list[float]:
    """Pseudo-random direction derived from the text; identical text, identical vector."""
    rng = _rng("embed", text)
    return [rng.uniform(-1.0, 1.0) for _ in range(dim)]


def canned_completion(rendered: str, prompt_hash: str, nonce: str, sample_index: int) -> str:
    if rendered.startswith("<|im_start|>system"):
        return _prefill(rendered, prompt_hash, nonce, sample_index)
    if "Please Answer the question and generate unit tests" in rendered:
        return _solution(prompt_hash, nonce, sample_index)
    if "convert the given coding task to a coding completion task" in rendered:
        return _conversion(rendered, prompt_hash)
    if "rate the quality of the code-related query" in rendered:
        return _quality_label(rendered)
    if "label the task tags for the user query" in rendered:
        return _category_label(rendered)
    if "## Documentation" in rendered:
        return _docs_question(rendered, prompt_hash)
    if "## Code Snippets" in rendered:
        return _dsa_question(prompt_hash)
    if "## Question 4" in rendered:
        return _assessment_question(prompt_hash)
    if "Thought and Solution" in rendered:
        return _reasoning_response(prompt_hash, nonce, sample_index)
    return f"canned response {prompt_hash[:12]}:{nonce}:{sample_index}"


def _prefill(rendered: str, prompt_hash: str, nonce: str, idx: int) -> str:
    for prefix, pool in _PREFILL_SUFFIXES.items():
        if rendered.endswith(prefix):
            rng = _rng("prefill", prompt_hash, nonce, str(idx))
            suffix = pool[rng.randrange(len(pool))]
            return (
                f"{suffix}<|im_end|>\n<|im_start|>assistant\n"
                "Sure, let's walk through it step by step."
            )
    return " do something useful with a list.<|im_end|>"


def _assessment_question(prompt_hash: str) -> str:
    rng = _rng("assessment", prompt_hash)
    task = _ASSESSMENT_TASKS[rng.randrange(len(_ASSESSMENT_TASKS))]
    limit = rng.randrange(4, 9)
    return f"{task} The input contains at most 10^{limit} elements."


def _extract(rendered: str, start: str, end: str) -> str:
    i = rendered.find(start)
    if i < 0:
        return ""
    j = rendered.find(end, i + len(start))
    if j < 0:
        return rendered[i + len(start):]
    return rendered[i + len(start):j]


def _docs_question(rendered: str, prompt_hash: str) -> str:
    content = _extract(rendered, "## Documentation\n", "\n\n----------------")
    package = _extract(rendered, "understanding of ", ".").strip() or "the package"
    analysis = (
        "The documentation describes the public entry points, their parameters "
        "and the intended call order, which is enough to target a realistic task."
    )
    h = stable_int("docs", prompt_hash)
    if "nothing but boilerplate" in content:
        question = "BAD_DOCUMENT"
    elif h % 19 == 0:
        # malformed output: question section never closed
        rng = _rng("docs-task", prompt_hash)
        task = _DOC_TASKS[rng.randrange(len(_DOC_TASKS))]
        return (
            f"<|Analysis Begin|>\n\n{analysis}\n\n<|Analysis End|>\n\n"
            f"<|Question Begin|>\n\nWrite a function using {package} that {task}."
        )
    else:
        rng = _rng("docs-task", prompt_hash)
        task = _DOC_TASKS[rng.randrange(len(_DOC_TASKS))]
        question = (
            f"Write a function using {package} that {task}. "
            "The function must accept its inputs as arguments and return the result "
            "instead of printing it. Document the expected input and output types."
        )
    return (
        f"<|Analysis Begin|>\n\n{analysis}\n\n<|Analysis End|>\n\n"
        f"<|Question Begin|>\n\n{question}\n\n<|Question End|>"
    )


def _dsa_question(prompt_hash: str) -> str:
    h = stable_int("dsa", prompt_hash)
    analysis = (
        "Core identification: the snippet implements a classic structure with "
        "well-known complexity bounds. Common pitfalls are the empty input and "
        "the update order of internal state."
    )
    rng = _rng("dsa-task", prompt_hash)
    task = _DSA_TASKS[rng.randrange(len(_DSA_TASKS))]
    if h % 23 == 0:
        return f"<|Analysis Begin|>\n\n{analysis}\n\n<|Analysis End|>\n\n{task}"
    return (
        f"<|Analysis Begin|>\n\n{analysis}\n\n<|Analysis End|>\n\n"
        f"<|Question Begin|>\n\n{task}\n\n<|Question End|>"
    )


def _quality_label(rendered: str) -> str:
    query = _extract(rendered, "## User Query\n```\n", "\n```").strip()
    lowered = query.lower()
    if "?????" in query or len(query) < 15:
        quality = "very poor"
        note = "The request is too vague to act on."
    elif "urgent" in lowered:
        quality = "poor"
        note = "The query presses for speed but omits requirements."
    elif "constraints" in lowered or "edge cases" in lowered:
        quality = "excellent"
        note = "The query states requirements, constraints and expected behavior."
    else:
        quality = "good"
        note = "The query is short but the intent is clear."
    return (
        f"{note}\n\n```\n{{\n    \"explanation\": \"{note}\",\n"
        f"    \"input_quality\": \"{quality}\"\n}}\n```"
    )


def _category_label(rendered: str) -> str:
    query = _extract(rendered, "## User Query\n```\n", "\n```").strip().lower()
    if "debug" in query or "error message" in query:
        primary, others = "Debugging", []
    elif "refactor" in query:
        primary, others = "Code Refactoring", []
    elif "class" in query:
        primary, others = "Class Design", []
    elif any(w in query for w in ("sort", "tree", "graph", "algorithm", "search")):
        primary, others = "Algorithm Implementation", ["Code Optimization"]
    else:
        primary, others = "Function Generation", []
    other_json = ", ".join(f'"{t}"' for t in others)
    return (
        "Based on the query the dominant intent is clear.\n\n"
        f"```\n{{\n    \"primary_tag\": \"{primary}\",\n"
        f"    \"other_tags\": [{other_json}]\n}}\n```"
    )


def _question_bucket(prompt_hash: str) -> str:
    h = stable_int("bucket", prompt_hash) % 100
    if h < 30:
        return "easy"
    if h < 60:
        return "medium"
    if h < 85:
        return "hard"
    return "fail"


_PASS_P = {"easy": 0.9, "medium": 0.5, "hard": 0.22, "fail": 0.0}


def _solution(prompt_hash: str, nonce: str, idx: int) -> str:
    rng = _rng("attempt", prompt_hash, nonce, str(idx))
    bucket = _question_bucket(prompt_hash)
    # a sliver of attempts is malformed model output, consuming the attempt
    shape_roll = rng.random()
    body = _SOLUTION_BODIES[rng.randrange(len(_SOLUTION_BODIES))]
    if shape_roll < 0.04:
        return f"<|Solution Begin|>\n```python\n{body}```\n<|Solution End|>\n<|Test Begin|>\n```python\nfrom solution import solve\n"
    if shape_roll < 0.07:
        tests = "from solution import solve\n\ndef check_solve():\n    assert solve([1]) is not None\n"
        return _solution_payload(body, tests)

    passed = rng.random() < _PASS_P[bucket]
    collected = 3 + rng.randrange(7)
    capped = stable_int("covcap", prompt_hash) % 10 == 0
    if passed:
        roll = rng.random()
        if capped:
            coverage = 0.9
        elif roll < 0.8:
            coverage = 1.0
        else:
            coverage = 0.9 if roll < 0.92 else 0.75
        directive = (
            f"# stub-runner: status=passed passed={collected} failed=0 "
            f"collected={collected} coverage={coverage}"
        )
    else:
        hazard = rng.random()
        if hazard < 0.06:
            directive = "# stub-runner: status=timeout"
        elif hazard < 0.1:
            directive = "# stub-runner: status=crash"
        else:
            failed = 1 + rng.randrange(max(1, collected - 1))
            coverage = round(0.4 + rng.random() * 0.5, 2)
            directive = (
                f"# stub-runner: status=failed passed={collected - failed} "
                f"failed={failed} collected={collected} coverage={coverage}"
            )
    tests = _test_suite(collected, directive)
    return _solution_payload(body, tests)


def _test_suite(count: int, directive: str) -> str:
    lines = ["from solution import solve", "", directive, ""]
    for i in range(count):
        lines.append(f"def test_case_{i}():")
        lines.append(f"    assert solve([{i}, {i + 1}]) is not None")
        lines.append("")
    return "\n".join(lines)


def _solution_payload(body: str, tests: str) -> str:
    return (
        "<|Solution Begin|>\n```python\n"
        + body
        + "```\n<|Solution End|>\n<|Test Begin|>\n```python\n"
        + tests
        + "\n```\n<|Test End|>"
    )


def _conversion(rendered: str, prompt_hash: str) -> str:
    h = stable_int("convert", prompt_hash)
    rng = _rng("convert", prompt_hash)
    names = ["process_items", "transform_data", "evaluate_input", "reduce_values", "scan_sequence"]
    name = names[rng.randrange(len(names))]
    roll = h % 100
    if roll < 5:
        return (
            "<|Completion Begin|>\nThe task asks for a data transformation "
            "helper with documented behavior.\n<|Completion End|>"
        )
    if roll < 10:
        solution = _extract(rendered, "Solution: ", "\n\n## Output Format").strip()
        return (
            f"<|Completion Begin|>\ndef {name}(data):\n"
            f'    """ Complete the implementation below.\n    """\n'
            f"{solution}\n<|Completion End|>"
        )
    if roll < 14:
        return f"<|Completion Begin|>\ndef {name}(data):"
    sample = rng.randrange(2, 9)
    return (
        f"<|Completion Begin|>\ndef {name}(data):\n"
        f'    """ Apply the documented transformation to data.\n'
        f"    >>> {name}([{sample}, {sample + 1}])\n"
        f"    [{sample}]\n"
        f'    """\n<|Completion End|>'
    )


def _reasoning_response(prompt_hash: str, nonce: str, idx: int) -> str:
    rng = _rng("reason", prompt_hash, nonce, str(idx))
    roll = rng.random()
    if roll < 0.05:
        return "<think>\nThe problem is straightforward.\n</think>\n\nUse a loop and a running accumulator."
    if roll < 0.11:
        return (
            "<think>\nShort check.\n</think>\n\n```python\n"
            "def solve(data):\n    return data\n"
            "# stub-runner: status=passed passed=4 failed=0 collected=4 coverage=1.0\n```"
        )
    sentences = [
        _THINK_SENTENCES[rng.randrange(len(_THINK_SENTENCES))]
        for _ in range(6 + rng.randrange(10))
    ]
    think = " ".join(sentences)
    passed = rng.random() < 0.7
    if rng.random() < 0.08:
        code = (
            "class Helper:\n    def run(self, data):\n        return sorted(data)\n\n"
            "def solve(data):\n    return Helper().run(data)\n"
            "# stub-runner: status=passed passed=5 failed=0 collected=5 coverage=1.0"
        )
    elif passed:
        code = (
            "def solve(data):\n    out = []\n    for item in data:\n"
            "        out.append(item)\n    return out\n"
            "# stub-runner: status=passed passed=5 failed=0 collected=5 coverage=1.0"
        )
    else:
        code = (
            "def solve(data):\n    return None\n"
            "# stub-runner: status=failed passed=1 failed=4 collected=5 coverage=0.6"
        )
    return (
        f"<think>\n{think}\n</think>\n\n"
        "The approach follows directly from the analysis above; the final "
        "implementation is below.\n\n"
        f"```python\n{code}\n```"
    )
