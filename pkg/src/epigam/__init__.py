"""Penalized GAM toolkit for epidemic surveillance data.

Three pipelines built on a shared penalized-regression core:

* weekly autoregressive infection models across age groups, robust to an
  unknown multiplicative case-detection ratio,
* daily hospitalisation nowcasting from reporting triangles, with the
  estimated delay distribution feeding an offset-corrected incidence model,
* weekly multinomial ICU-bed occupancy models with rolling one-week-ahead
  forecast evaluation.
"""

__version__ = "0.1.0"
