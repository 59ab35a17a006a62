"""Unit conversions. Everything internal is in Hartree atomic units."""

#: one atomic unit of time in femtoseconds
AU_TIME_FS = 0.02418884326


def fs_to_au(t_fs):
    return t_fs / AU_TIME_FS


def au_to_fs(t_au):
    return t_au * AU_TIME_FS
