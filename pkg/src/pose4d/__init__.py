"""Camera-controlled 4D scene generation and reconstruction toolkit."""
