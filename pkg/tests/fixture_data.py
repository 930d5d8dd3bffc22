"""Shared fixtures: the two-table generated sample, a small real dataset,
and scripted mock behaviors that drive the loop end to end.

The cooperative script makes every revision fix the current slice without
regressions: the reviser answers with a prompt containing ``cover:sample-i``
markers and the solver answers correctly exactly when the marker for the
question's sample is present. The adversarial script revises with junk
that never fixes anything.
"""

from __future__ import annotations

import json
from pathlib import Path

from finloop.config import (
    BackendConfig,
    BudgetConfig,
    GeneratorSection,
    RunConfig,
    ToleranceConfig,
    VerifierSection,
    dumps_config,
)

# The generated two-table expenses/revenue sample (difficulty 4, answer 60).
PAPER_PASSAGE = (
    "The company provides a breakdown of expenses over the last four years as follows:\n"
    "|Expense Category             |2020|2021|2022|2023|\n"
    "|-----------------------------|----|----|----|----|\n"
    "|Research & Development       |320 |350 |370 |400 |\n"
    "|Sales & Marketing            |220 |210 |200 |190 |\n"
    "|General & Administrative     |150 |155 |160 |165 |\n"
    "\n"
    "In a separate table, the company also tracks total revenue by region:\n"
    "|Region      |2020|2021|2022|2023|\n"
    "|------------|----|----|----|----|\n"
    "|North America|600|650 |700 |750 |\n"
    "|Europe       |300|310 |320 |330 |\n"
    "|Asia         |200|220 |240 |260 |\n"
    "\n"
    "Total expenses and revenues have increased modestly each year, primarily driven by "
    "investments in innovation and operational efficiency."
)
PAPER_QUESTION = (
    "What is the combined increase in 'Research & Development' expense from 2021 to 2023 "
    "and 'General & Administrative' expense from 2020 to 2022 according to the tables?"
)
PAPER_ANSWER = 60.0
PAPER_RAW = (
    f"Generated Paragraphs:\n{PAPER_PASSAGE}\n\n"
    f"Generated Question:\n{PAPER_QUESTION}\n\n"
    f"Generated Answer: 60"
)


def real_records() -> list[dict]:
    """Eight real-style records, answers spread across magnitude buckets."""
    spread = [-25, 0.5, 5, 50, 500, 5000, 2000000, 60]
    subsets = ["SimpShort", "SimpShort", "CompShort", "CompShort",
               "SimpLong", "SimpLong", "CompLong", "CompLong"]
    records = []
    for i, (answer, subset) in enumerate(zip(spread, subsets), start=1):
        passage = (
            f"Fiscal overview for unit {i}:\n"
            f"|Item|2020|2021|\n"
            f"|----|----|----|\n"
            f"|Net Position|{i * 10}|{answer}|\n"
        )
        records.append({
            "id": f"real-{i:02d}",
            "paragraphs": passage,
            "question": "What is Net Position in 2021?",
            "ground_truth": answer,
            "subset": subset,
        })
    return records


def sample_passage(i: int) -> str:
    return (
        f"Segment {i} reports the following quarterly metrics:\n"
        f"|Metric|2020|2021|\n"
        f"|------|----|----|\n"
        f"|Alpha Revenue|{100 + i}|{110 + i}|\n"
        f"|Beta Revenue|{200 + i}|{210 + i}|\n"
    )


_SAMPLE_QUESTIONS = {
    1: ("What is Alpha Revenue in 2020?", lambda i: 100 + i),
    2: ("What is the increase in Alpha Revenue from 2020 to 2021?", lambda i: 10),
    3: ("What is the sum of Beta Revenue in 2020 and 2021?", lambda i: 410 + 2 * i),
    4: ("What is the difference between Beta Revenue and Alpha Revenue in 2021?",
        lambda i: 100),
    5: ("What is Beta Revenue in 2021?", lambda i: 210 + i),
}


def sample_question(i: int) -> str:
    return _SAMPLE_QUESTIONS[i][0]


def sample_gold(i: int) -> int:
    return _SAMPLE_QUESTIONS[i][1](i)


def sample_raw(i: int) -> str:
    return (
        f"Generated Paragraphs:\n{sample_passage(i)}\n"
        f"Generated Question:\n{sample_question(i)}\n\n"
        f"Generated Answer: {sample_gold(i)}"
    )


def _generator_rules(count: int = 5) -> list[dict]:
    return [
        {"role": "generator",
         "when": {"contains": f"(current difficulty level: {i})"},
         "respond": sample_raw(i)}
        for i in range(1, count + 1)
    ]


def _solver_rules(count: int = 5) -> list[dict]:
    # Correct exactly when the prompt carries this sample's cover marker
    # and the request asks this sample's question.
    import re

    rules = []
    for i in range(1, count + 1):
        question = re.escape(sample_question(i))
        rules.append({
            "role": "solver",
            "when": {"regex": rf"(?s)cover:sample-{i}\b.*{question}"},
            "respond": f"Looked it up in the table. The final answer is {sample_gold(i)}.",
        })
    return rules


def _covering_prompt(upto: int) -> str:
    markers = "\n".join(f"cover:sample-{j}" for j in range(1, upto + 1))
    return (
        "You answer financial questions from the passage and finish with the "
        f"final numeric answer.\n{markers}"
    )


def cooperative_script(count: int = 5) -> dict:
    rules = _generator_rules(count) + _solver_rules(count)
    for i in range(1, count + 1):
        rules.append({
            "role": "reviser",
            "when": {"contains": sample_question(i)},
            "respond": _covering_prompt(i),
        })
    rules.append({
        "role": "recommender",
        "when": {"always": True},
        "respond": ("The prompt never tells the model how to anchor on table rows.\n"
                    "1. Tell the model to match row labels exactly.\n"
                    "2. Tell the model to re-check the requested years."),
    })
    return {"default_response": "I cannot determine the answer.", "rules": rules}


def adversarial_script(count: int = 5) -> dict:
    rules = _generator_rules(count)
    rules.append({
        "role": "recommender",
        "when": {"always": True},
        "respond": "Something is off.\n1. Try being more careful.",
    })
    rules.append({
        "role": "reviser",
        "when": {"always": True},
        "respond": "Answer the question very carefully and double-check everything.",
    })
    return {"default_response": "I cannot determine the answer.", "rules": rules}


def write_jsonl(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def write_script(path: Path, script: dict) -> Path:
    path.write_text(json.dumps(script, indent=2), encoding="utf-8")
    return path


def make_run_config(
    tmp_path: Path,
    script: dict,
    *,
    max_examples: int = 5,
    max_refinements: int = 10,
    inner_cap: int = 4,
    rng_seed: int = 7,
    kl_threshold: float = 5.0,
    ledger_name: str = "run.jsonl",
) -> Path:
    """Write dataset, mock script, and config files; returns the config path."""
    records = real_records()
    datasets = {}
    for subset in ("SimpShort", "CompShort", "SimpLong", "CompLong"):
        rows = [r for r in records if r["subset"] == subset]
        datasets[subset] = str(write_jsonl(tmp_path / f"{subset.lower()}.jsonl", rows))
    script_path = write_script(tmp_path / "script.json", script)
    config = RunConfig(
        regime="Short",
        rng_seed=rng_seed,
        ledger_path=str(tmp_path / ledger_name),
        seed_prompt="base",
        concurrency=2,
        dataset_paths=datasets,
        backends={"default": BackendConfig(kind="mock", script=str(script_path))},
        budgets=BudgetConfig(
            max_examples=max_examples,
            max_refinements=max_refinements,
            inner_cap=inner_cap,
            max_regenerations=5,
            token_ceiling=50_000_000,
        ),
        tolerances=ToleranceConfig(kl_threshold=kl_threshold),
        generator=GeneratorSection(),
        verifier=VerifierSection(),
    )
    config_path = tmp_path / "config.toml"
    config_path.write_text(dumps_config(config), encoding="utf-8")
    return config_path
