# Source: executor fault injection
# Inputs:
#   x (decimal, dimensionless): any number
# Outputs:
#   y (decimal, dimensionless): echo of x
print("<html>not json</html>")
