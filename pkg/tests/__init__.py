#  Copyright (c) 2020 Robert Lieck

