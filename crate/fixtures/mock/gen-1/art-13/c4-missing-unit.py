# Source: Article 13 (2) of the Measures for the Payment of Litigation Costs
# Inputs:
#   case_amount (decimal): total amount of the joint property divided in the divorce case
# Outputs:
#   total_fee (decimal, yuan): minimum total litigation fee of the divorce case
#   max_total_fee (decimal, yuan): maximum total litigation fee of the divorce case
import json
import sys

case_amount = json.load(sys.stdin)["inputs"]["case_amount"] or 0
extra = 0
# The law states: the part exceeding 200,000 yuan is paid at 0.05%.
if case_amount > 200000:
    extra = (case_amount - 200000) * 0.0005
print(json.dumps({"outputs": {"total_fee": round(50 + extra, 2), "max_total_fee": round(300 + extra, 2)}}))
