# Copyright 2024 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Text templates for the ablation table and metrics summary."""

from typing import Any, Dict

import jinja2

ABLATION_TABLE = """| No. | Network | Losses or Modules | ACC | AUC | TAR0.1 | TAR0.01 | PBCA |
|---|---|---|---|---|---|---|---|
{% for row in rows -%}
| {{ row["No."] }} | {{ row["Network"] }} | {{ row["Losses"] }} | {{ pct(row["ACC"]) }} | {{ pct(row["AUC"]) }} | {{ pct(row["TAR0.1"]) }} | {{ pct(row["TAR0.01"]) }} | {{ pct(row["PBCA"]) }} |
{% endfor %}"""

METRICS_SUMMARY = """{{ counts.total }} samples ({{ counts.real }} real, {{ counts.fake }} fake), threshold {{ "%.2f"|format(threshold) }}
ACC     {{ pct(acc) }}
AUC     {{ pct(auc) }}
TAR0.1  {{ pct(tarAt0p1) }} (at FAR {{ pct(farAt0p1) }})
TAR0.01 {{ pct(tarAt0p01) }} (at FAR {{ pct(farAt0p01) }})
PBCA    {{ pct(pbca) }}
{% if meanPairDistance is defined -%}
Mean pair distance {{ "%.4f"|format(meanPairDistance) }}
{% endif %}
{% for kind, m in (perManipulation or {}).items() -%}
{{ "%-8s"|format(kind) }}ACC {{ pct(m.acc) }}  AUC {{ pct(m.auc) }}  ({{ m.count }} fake)
{% endfor %}"""


def pct(value) -> str:
    """Percent with two decimals; missing or NaN values print as '-'."""
    if value is None or value != value:
        return "-"
    return f"{100 * value:.2f}"


def render(template: str, context: Dict[str, Any]) -> str:
    return jinja2.Template(template).render({"pct": pct, **context})
