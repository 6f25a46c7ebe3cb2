# Source: Article 7 of the Interpretation on Compensation for Personal Injury
# Inputs:
#   lost_days (integer, day): number of working days the victim lost
#   income_reduction (decimal, yuan): actually reduced income of a victim with a fixed income
#   average_income (decimal, yuan/year): victim's average annual income over the last three years
#   industry_salary (decimal, yuan/year): previous-year average salary of the same or similar industry
# Outputs:
#   lost_wages (decimal, yuan): compensation for the lost working time
import json
import sys

inputs = json.load(sys.stdin)["inputs"]
days = inputs["lost_days"] or 0
# The law states: with a fixed income, lost wages are the actually reduced income.
if inputs["income_reduction"] is not None:
    lost_wages = inputs["income_reduction"]
# According to the law, without a fixed income the three-year average income is used.
elif inputs["average_income"] is not None:
    lost_wages = inputs["average_income"] / 365 * days
# According to the law, the industry average salary applies when income cannot be proven.
else:
    lost_wages = (inputs["industry_salary"] or 0) / 365 * days
print(json.dumps({"outputs": {"lost_wages": round(lost_wages, 2)}}))
