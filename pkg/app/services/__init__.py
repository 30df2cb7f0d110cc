"""Services implementing data handling, estimation, forecasting and diagnostics."""
