struct bin_to_ascii_ret {
  unsigned int stored;
  int last_was_cr;
};

struct bin_to_ascii_ret
vsf_ascii_bin_to_ascii(
 arr<const char> p_in: count(in_len),
 arr<char> p_out: count(in_len * 2),
 unsigned int in_len, int prev_cr) {
  struct bin_to_ascii_ret ret;
  unsigned int indexx = 0;
  unsigned int written = 0;
  char last_char = prev_cr ? '\r' : 0;
  while (indexx < in_len) {
    char the_char = p_in[indexx];
    if (the_char == '\n' && last_char != '\r') {
      *p_out++ = '\r';
      written++;
    }
    *p_out++ = the_char;
    written++;
    last_char = the_char;
    indexx++;
  }
  ret.stored = written;
  ret.last_was_cr = (last_char == '\r');
  return ret;
}
