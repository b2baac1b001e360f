# This file enables pytest to discover tests in this package
