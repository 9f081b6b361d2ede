# Test package for fbsde
