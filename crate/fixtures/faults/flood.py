# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
import sys

sys.stdout.write("x" * 200000)
