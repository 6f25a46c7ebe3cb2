import json
import sys

case_amount = json.load(sys.stdin)["inputs"]["case_amount"] or 0
# Divorce case fee with the property surcharge.
extra = max(case_amount - 200000, 0) * 0.0005
print(json.dumps({"outputs": {"total_fee": round(50 + extra, 2)}}))
