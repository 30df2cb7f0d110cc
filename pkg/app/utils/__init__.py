"""Cross-cutting helpers: random streams, worker pools, linear algebra and IO."""
