"""Reserved token ids, fixed project-wide."""

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2
FIRST_CONTENT_ID = 3
