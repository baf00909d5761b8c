"""Declaration-prompt VQA on a synthetic world.

Subpackages: world (scene/QA generation), declaration (question-to-statement
conversion and BLEU), encoder (the small vision-language transformer),
pretrain (MLM+ITM), dpt (prompt paradigms and task-adapted losses), harness
(evaluation protocols and reports).
"""

__version__ = "0.1.0"
