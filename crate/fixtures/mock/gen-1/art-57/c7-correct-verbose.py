# Source: Article 57 of the Qinghai-Tibet Plateau Ecological Protection Law
# Inputs:
#   total_investment (decimal, yuan): total investment of the construction project
# Outputs:
#   min_fine (decimal, yuan): lowest fine, 1 percent of the total investment
#   max_fine (decimal, yuan): highest fine, 5 percent of the total investment
import json
import sys

investment = json.load(sys.stdin)["inputs"]["total_investment"] or 0
# The law states: a fine of not less than 1 percent of the total investment.
lower_rate = 1 / 100
# The law states: and not more than 5 percent of the total investment.
upper_rate = 5 / 100
min_fine = investment * lower_rate
max_fine = investment * upper_rate
min_fine = round(min_fine, 2)
max_fine = round(max_fine, 2)
print(json.dumps({"outputs": {"min_fine": min_fine, "max_fine": max_fine}}))
