# This file allows the commands directory to be treated as a package
