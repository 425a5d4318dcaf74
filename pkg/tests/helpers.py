"""Shared builders for scripted replies and transcripts."""

from __future__ import annotations

import json

from looplab.core import TokenUsage
from looplab.gateway import ScriptedTranscript

USAGE = TokenUsage(100, 20, 10)


def data_explore_reply(purpose: str = "Check basic shape and target balance.",
                       code: str = 'print("rows=12 cols=3 balance=0.5")') -> str:
    return f"{purpose}\n```python\n{code}\n```"


DATA_REPORT_BODY = """Data Analysis Report
===========
1. Data Modality and Scale
- tabular; train/val/test = 12/4/4 rows
2. Basic Information
- 3 columns: f1, f2, label; all numeric
3. Target Distribution
- label balance 50/50
4. Data Quality
- no missing values, no duplicates
5. Feature-Target Relationship and Performance Clues
- f1 strongly separates the classes
6. Data Storage Structure and Loading Method
- one CSV per split; load with pandas
    import pandas as pd
    train = pd.read_csv("data/train.csv")
7. In-depth Analysis Results
- a threshold on f1 alone reaches ~0.9 accuracy"""


def data_report_reply(body: str = DATA_REPORT_BODY) -> str:
    return f"Final report below.\n```Data_Analysis_Report\n{body}\n```"


def plan_reply(text: str = "Training Plan\nStep 1: Load and scale the data\n"
                           "Step 2: Fit a small classifier with an ensemble for uncertainty\n"
                           "Step 3: Evaluate accuracy and calibration, save metrics") -> str:
    return f"```plan_md\n{text}\n```"


def review_reply() -> str:
    return (
        "```review\n# Evaluation and Questions\n## Key Issues\n"
        "- Is the validation split leakage-free?\n- Is one seed enough?\n"
        "## Improvement Suggestions\n1. Fix the random seed\n2. Add a majority baseline\n```"
    )


def refined_plan_reply(text: str = "Training Plan (Improved Version)\n"
                                   "Step 1: Load and scale the data with a fixed seed\n"
                                   "Step 2: Fit a 3-member ensemble classifier\n"
                                   "Step 3: Evaluate accuracy, calibration and a baseline, save metrics") -> str:
    return f"```plan_md\n{text}\n```"


def step_reply(purpose: str, code: str, status: str = "CONTINUE") -> str:
    return (
        f"```purpose\n{purpose}\n```\n"
        f"```python\n{code}\n```\n"
        f"```status\n{status}\n```"
    )


FEEDBACK_BODY = """# Training Feedback Report
## I. Results Review
- accuracy 0.91 on the held-out split
## II. Problems Found
- calibration slightly over-confident in the top bin
## III. Improvement Suggestions
- try temperature scaling next round"""


def feedback_continue_reply(purpose: str = "Summarize the saved metrics.",
                            code: str = 'print("feedback pass: metrics look consistent")') -> str:
    return (
        f"```status\nCONTINUE\n```\n"
        f"```purpose\n{purpose}\n```\n"
        f"```python\n{code}\n```"
    )


def feedback_finish_reply(body: str = FEEDBACK_BODY) -> str:
    return f"```status\nFINISH\n```\n```Feedback_Report\n{body}\n```"


def decision_reply(action: str = "continue", next_start: str = "planning",
                   stop_reason: str = "", decision_reason: str = "keep iterating",
                   next_start_reason: str = "refine the plan with the feedback") -> str:
    payload = {
        "action": action,
        "next_start": next_start,
        "stop_reason": stop_reason,
        "decision_reason": decision_reason,
        "next_start_reason": next_start_reason,
    }
    return f"```decision_json\n{json.dumps(payload, indent=2)}\n```"


def latex_section(title: str, body: str = "Plain guidance text.") -> str:
    return f"```latex\n\\section{{{title}}}\n{body}\n```"


def latex_document(extra: str = "") -> str:
    return (
        "```latex\n"
        "\\documentclass{article}\n"
        "\\usepackage{graphicx}\\usepackage{booktabs}\n"
        "\\title{Modeling Report}\\author{automated pipeline}\n"
        "\\begin{document}\\maketitle\n"
        "\\section{Data Analysis}\nOverview text.\n"
        "\\section{Model Training}\nTraining text.\n"
        "\\section{Uncertainty Analysis}\nUncertainty text.\n"
        f"{extra}"
        "\\end{document}\n"
        "```"
    )


STEP1_CODE = 'acc = 0.91\nprint(f"trained, val accuracy {acc}")'
STEP2_CODE = (
    "import json\n"
    "with open('metrics.json', 'w') as f:\n"
    "    json.dump({'Accuracy': acc}, f)\n"
    "print('metrics saved')"
)


def add_design_calls(t: ScriptedTranscript, round_idx: int) -> None:
    t.add("planning", round_idx, 0, plan_reply(), USAGE)
    t.add("planning", round_idx, 1, review_reply(), USAGE)
    t.add("planning", round_idx, 2, refined_plan_reply(), USAGE)


def add_coding_calls(t: ScriptedTranscript, round_idx: int) -> None:
    t.add("code_execution", round_idx, 0,
          step_reply("Train the classifier.", STEP1_CODE, "CONTINUE"), USAGE)
    t.add("code_execution", round_idx, 1,
          step_reply("Evaluate and save metrics.", STEP2_CODE, "FINISH"), USAGE)
    t.add("code_execution", round_idx, 1000, feedback_continue_reply(), USAGE)
    t.add("code_execution", round_idx, 1001, feedback_finish_reply(), USAGE)


def add_report_calls(t: ScriptedTranscript) -> None:
    t.add("report_generation", 0, 0, latex_section("Data Analysis"), USAGE)
    t.add("report_generation", 0, 1, latex_section("Model Training"), USAGE)
    t.add("report_generation", 0, 2, latex_section("Uncertainty Analysis"), USAGE)
    t.add("report_generation", 0, 3, latex_document(), USAGE)


def demo_two_round_transcript() -> ScriptedTranscript:
    """The bundled happy path: two rounds, model-issued stop after round 2.

    Round 1 runs every stage; the decision restarts round 2 at planning, so
    round 2 has no data-understanding calls. 22 entries total.
    """
    t = ScriptedTranscript()
    t.add("data_understanding", 1, 0, data_explore_reply(), USAGE)
    t.add("data_understanding", 1, 1, data_report_reply(), USAGE)
    add_design_calls(t, 1)
    add_coding_calls(t, 1)
    t.add("meta", 1, 0, decision_reply("continue", "planning"), USAGE)
    add_design_calls(t, 2)
    add_coding_calls(t, 2)
    t.add("meta", 2, 0,
          decision_reply("stop", stop_reason="Performance plateau; stopping",
                         decision_reason="second round matched the first"),
          USAGE)
    add_report_calls(t)
    return t
