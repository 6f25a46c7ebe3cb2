# Source: Article 13 (2) of the Measures for the Payment of Litigation Costs
# Inputs:
#   case_amount (decimal, yuan): total amount of the joint property divided in the divorce case
# Outputs:
#   total_fee (decimal, yuan): minimum total litigation fee of the divorce case
#   max_total_fee (decimal, yuan): maximum total litigation fee of the divorce case
import json
import sys

case_amount = json.load(sys.stdin)["inputs"]["case_amount"] or 0
threshold = 200000
rate = 0.05 / 100
extra = 0
# The law states: no additional fee when the total property does not exceed 200,000 yuan.
if case_amount > threshold:
    # The law states: the part exceeding 200,000 yuan is paid at 0.05%.
    extra = (case_amount - threshold) * rate
# The law states: each divorce case pays 50 yuan to 300 yuan.
low = 50
high = 300
print(json.dumps({"outputs": {"total_fee": round(low + extra, 2), "max_total_fee": round(high + extra, 2)}}))
