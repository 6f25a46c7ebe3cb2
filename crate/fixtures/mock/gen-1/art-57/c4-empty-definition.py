# Source: Article 57 of the Qinghai-Tibet Plateau Ecological Protection Law
# Inputs:
#   total_investment (decimal, yuan):
# Outputs:
#   min_fine (decimal, yuan): lowest fine, 1 percent of the total investment
#   max_fine (decimal, yuan): highest fine, 5 percent of the total investment
import json
import sys

investment = json.load(sys.stdin)["inputs"]["total_investment"] or 0
# The law states: not less than 1 percent but not more than 5 percent.
print(json.dumps({"outputs": {"min_fine": round(investment * 0.01, 2), "max_fine": round(investment * 0.05, 2)}}))
