# Source: Article 57 of the Qinghai-Tibet Plateau Ecological Protection Law
# Inputs:
#   total_investment (decimal, yuan): total investment of the construction project
# Outputs:
#   min_fine (decimal, yuan): lowest fine, 1 percent of the total investment
#   max_fine (decimal, yuan): highest fine, 5 percent of the total investment
import json
import sys

investment = json.load(sys.stdin)["inputs"]["total_investment"] or 0
# The law states: not more than 5 percent of the total investment.
max_fine = round(investment * 0.05, 2)
# assuming the minimum is half of the maximum
min_fine = max_fine / 2
print(json.dumps({"outputs": {"min_fine": min_fine, "max_fine": max_fine}}))
