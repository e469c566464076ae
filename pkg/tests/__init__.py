# Tests package for mtfatt
